"""
Region tokens and distillation losses
=====================================

A walk through one synthetic scene: the two detectors, the Word-Tag-Image
token layout, and the closed-form values of the distillation losses.
Run with ``python notebooks/01_tokens_and_losses.py``.
"""

import math

import numpy as np

from vldistill.autograd import Tensor
from vldistill.losses import SampleQueue, attention_loss, classification_loss, nce_hidden_loss
from vldistill.tokens import generate_corpus

# one scene, seen by the strong (teacher) and light (student) detectors
rec = generate_corpus(1, seed=0)[0]
for name, props in rec.proposals.items():
    print(f"{name:>6}: {len(props)} proposals, classes {[p.predicted_class for p in props]}")

# aligned inputs: the teacher extractor reads the student's boxes, so the
# two token sequences line up position by position
student = rec.sequence("light", "student")
aligned = rec.sequence("light", "teacher")
print("token ids     ", student.ids)
print("same layout   ", np.array_equal(student.ids, aligned.ids))
print("visual widths ", student.visual.shape[1], "vs", aligned.visual.shape[1])

# closed forms: orthogonal single negative, uniform logits, flat attention
t = lambda a: Tensor(np.asarray(a, dtype=np.float64))
q = SampleQueue(np.array([[0.0, 1.0]], np.float32))
nce, _ = nce_hidden_loss(t([[1.0, 0.0]]), np.array([[1.0, 0.0]]), q, t(np.eye(2)), 1.0)
print(f"NCE, one orthogonal negative: {float(nce.data):.4f}  (log(1 + e) - 1 = {math.log(1 + math.e) - 1:.4f})")

q8 = SampleQueue(np.tile([0.6, 0.8], (8, 1)).astype(np.float32))
nce8, _ = nce_hidden_loss(t([[0.6, 0.8]]), np.array([[0.6, 0.8]]), q8, t(np.eye(2)), 1.0)
print(f"NCE, 8 identical negatives:   {float(nce8.data):.4f}  (log 9 = {math.log(9):.4f})")

eye = t([[[1.0, 0.0], [0.0, 1.0]]])
print(f"attention MSE, identity vs flat: {float(attention_loss(eye, np.full((1, 2, 2), 0.5), np.ones(2, bool)).data):.4f}")
print(f"soft labels, equal logits:       {float(classification_loss(t([0.0, 0.0]), np.zeros(2)).data):.4f}"
      f"  (ln 2 = {math.log(2):.4f})")
