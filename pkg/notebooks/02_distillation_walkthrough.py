"""
Teacher, adaptation and student distillation at toy scale
=========================================================

Trains a small teacher, adapts it to the student detector's boxes, then
distills three students (no distillation, attention only, attention plus
contrastive hidden states) and compares masked-token accuracy and the
attention distance to the teacher. Budgets are cut down so the script
finishes in a few minutes; the acceptance tests use the full defaults.
"""

import numpy as np

from vldistill import (
    ALIGNED_TEACHER_VIEW,
    TEACHER_VIEW,
    DistillConfig,
    TrainConfig,
    adapt_teacher,
    attention_distance,
    distill_pretrain,
    evaluate,
    generate_corpus,
    train_teacher,
)

train = generate_corpus(600, seed=0)
held_out = generate_corpus(150, seed=0, start_id=1_000_000)

teacher = train_teacher(TrainConfig(steps=600, learning_rate=1e-3, warmup_steps=100), train)
adapted = adapt_teacher(teacher, train, TrainConfig(steps=150, learning_rate=3e-4, warmup_steps=50))

acc = lambda ckpt, view=None: evaluate(ckpt, held_out, view=view)["masked_token_accuracy"]
print(f"teacher, own tokens      {acc(teacher, TEACHER_VIEW):.3f}")
print(f"teacher, aligned tokens  {acc(teacher, ALIGNED_TEACHER_VIEW):.3f}")
print(f"adapted, aligned tokens  {acc(adapted):.3f}")

rows = {
    "vlp only": DistillConfig(alpha=0.0, beta=0.0),
    "vlp + attention": DistillConfig(beta=0.0),
    "vlp + attention + hidden": DistillConfig(queue_size=1024),
}
budget = TrainConfig(steps=300, warmup_steps=50)
for name, cfg in rows.items():
    student = distill_pretrain(adapted, None, train, cfg, budget)
    print(f"{name:<26} acc {acc(student):.3f}  attention distance "
          f"{attention_distance(student, adapted, held_out):.3f}")

# the loss log is a plain table; the distillation terms shrink as training goes on
log = student.metrics
print("step  total   att     hid")
for step in np.linspace(1, len(log), 5).astype(int):
    r = log[step - 1]
    print(f"{r['step']:>4}  {r['total']:.3f}  {r['att']:.4f}  {r['hid']:.3f}")
