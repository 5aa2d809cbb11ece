"""Acceptance criteria 1-10, one test each, on the default desk corpus.

Every test reports a ``criterion N: PASS|FAIL`` line (collected again in the
terminal summary). Criteria 5-8 share cached teacher and student runs; the
whole module takes a few tens of minutes on one CPU core.
"""

import json
import math
import time

import numpy as np
import pytest

from vldistill import cli
from vldistill.autograd import Tensor, grad_check
from vldistill.checkpoint import (
    CorruptHeaderError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    dumps,
    loads,
)
from vldistill.harness import (
    ALIGNED_TEACHER_VIEW,
    TEACHER_VIEW,
    TrainConfig,
    adapt_teacher,
    attention_distance,
    distill_pretrain,
    evaluate,
    model_config_for,
    train_teacher,
    train_vlp,
)
from vldistill.losses import (
    DistillConfig,
    SampleQueue,
    attention_loss,
    classification_loss,
    hidden_mse_loss,
    init_queue,
    nce_hidden_loss,
    pooled_mse_loss,
    queue_update,
)
from vldistill.objectives import (
    TaskHead,
    answer_loss,
    finetune_total,
    itm_choose,
    itm_loss,
    mask_tokens,
    mlm_loss,
    num_to_mask,
    pretrain_total,
)
from vldistill.rng import Rng
from vldistill.tokens import Limits, collate, generate_corpus
from vldistill.transformer import Transformer, TransformerConfig

SEEDS = [0, 1, 2, 3, 4]
TREND_ROWS = {
    "vlp": DistillConfig(alpha=0.0, beta=0.0),
    "vlp+att": DistillConfig(beta=0.0),
    "vlp+hid": DistillConfig(alpha=0.0),
    "vlp+both": DistillConfig(),
}


def budget(kind: str, **kw) -> TrainConfig:
    return TrainConfig(**{**cli.TRAIN_DEFAULTS[kind], **kw})


# -- shared runs ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    """The corpus pair ``vldistill gen-data`` writes with its default flags."""
    train = generate_corpus(cli.DEFAULT_TRAIN_SCENES, 0)
    ev = generate_corpus(cli.DEFAULT_EVAL_SCENES, 0, start_id=cli.EVAL_ID_OFFSET)
    return train, ev


@pytest.fixture(scope="module")
def teacher(desk):
    return train_teacher(budget("teacher"), desk[0])


@pytest.fixture(scope="module")
def adapted(desk, teacher):
    return adapt_teacher(teacher, desk[0], budget("adapt"))


class Students:
    """Lazily trained students keyed by (teacher, row, queue size, seed), with timings."""

    def __init__(self, desk, teachers):
        self.train, self.eval = desk
        self.teachers = teachers
        self.cache = {}
        self.cpu = {}

    def get(self, teacher: str, row: str, seed: int, queue_size: int | None = None):
        key = (teacher, row, queue_size, seed)
        if key not in self.cache:
            cfg = TREND_ROWS[row]
            if queue_size is not None:
                cfg = DistillConfig.from_dict({**cfg.to_dict(), "queue_size": queue_size})
            t0 = time.process_time()
            ckpt = distill_pretrain(self.teachers[teacher], None, self.train, cfg,
                                    budget("student", seed=seed))
            acc = evaluate(ckpt, self.eval)["masked_token_accuracy"]
            self.cpu[key] = time.process_time() - t0
            self.cache[key] = (ckpt, acc)
        return self.cache[key]

    def accuracy(self, teacher: str, row: str, seed: int, queue_size: int | None = None) -> float:
        return self.get(teacher, row, seed, queue_size)[1]

    def mean(self, teacher: str, row: str, queue_size: int | None = None) -> float:
        return float(np.mean([self.accuracy(teacher, row, s, queue_size) for s in SEEDS]))


@pytest.fixture(scope="module")
def students(desk, teacher, adapted):
    return Students(desk, {"adapted": adapted, "original": teacher})


# -- 1. gradient suite ------------------------------------------------------------------

def _tiny_models():
    cfg = dict(num_heads=2, ffn_dim=8, max_tokens=6, vocab_size=64, num_answers=3)
    student = Transformer.init(TransformerConfig(num_layers=2, hidden_dim=6, visual_dim=22, **cfg),
                               Rng(0, "s")).astype(np.float64)
    teacher = Transformer.init(TransformerConfig(num_layers=2, hidden_dim=8, visual_dim=54, **cfg),
                               Rng(0, "t")).astype(np.float64)
    return student, teacher


def _gradient_cases():
    """(name, f, inputs) for every loss and both totals, T <= 6 and d <= 8."""
    rng = np.random.default_rng(0)
    t64 = lambda *shape: Tensor(rng.normal(size=shape))
    pad = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]], bool)
    queue = init_queue(5, 8, Rng(0, "q"))
    ht = rng.normal(size=(2, 6, 8))
    a_t = rng.dirichlet(np.ones(6), size=(2, 2, 6))
    w_h, phi = t64(6, 8), t64(6, 8)
    z_soft = rng.normal(size=(3, 4))
    cases = [
        ("attention", lambda a: attention_loss(a, a_t, pad), [t64(2, 2, 6, 6)]),
        ("hidden mse", lambda h, w: hidden_mse_loss([h], [ht], w, pad, [(0, 0)]), [t64(2, 6, 6), w_h]),
        ("hidden mse mean-pooled", lambda h, w: pooled_mse_loss(h, ht, w, pad), [t64(2, 6, 6), w_h]),
        ("hidden nce token", lambda h, p: nce_hidden_loss(h, ht, queue, p, 0.5, "token", pad)[0],
         [t64(2, 6, 6), phi]),
        ("hidden nce mean-pooled", lambda h, p: nce_hidden_loss(h, ht, queue, p, 0.5, "meanpool", pad)[0],
         [t64(2, 6, 6), phi]),
        ("soft labels", lambda z: classification_loss(z, z_soft, 2.0), [t64(3, 4)]),
    ]
    from vldistill.transformer import ForwardTrace
    tr = lambda h: ForwardTrace([h], [], h[:, 0], np.ones(h.shape[:2], bool))
    from vldistill.objectives import MaskingPlan
    plans = [MaskingPlan(np.array([1, 2]), np.array([3, 9]), "m"), None]
    head = lambda w, b, kind: TaskHead(kind, w, b)
    cases += [
        ("mlm", lambda h, w, b: mlm_loss(tr(h), head(w, b, "mlm_vocab"), plans)[0],
         [t64(2, 6, 6), t64(6, 12), t64(12)]),
        ("itm", lambda h, w, b: itm_loss(tr(h), head(w, b, "itm_binary"), np.array([1, 0])),
         [t64(2, 6, 6), t64(6, 1), t64(1)]),
    ]

    # both totals through real student/teacher encoders
    student, frozen = _tiny_models()
    frozen.freeze()
    corpus = generate_corpus(2, seed=0)
    small = Limits(cap_len=2, tag_len=1, vis_len=0)
    batch = collate([r.sequence("light", "student", small) for r in corpus])
    t_batch = collate([r.sequence("light", "teacher", small) for r in corpus])
    t_trace = frozen.forward(t_batch)
    names = ["layer0.attn.q.w", "layer1.ffn1.w", "emb.word"]
    mlm_plans = [MaskingPlan(np.array([1]), np.array([5]), "m")] * 2
    cfg = DistillConfig(alpha=10.0, beta=10.0, cls_weight=1.0)

    def with_params(ps, fn):
        saved = {n: student.params[n] for n in names}
        student.params.update(dict(zip(names, ps)))
        try:
            return fn(student.forward(batch))
        finally:
            student.params.update(saved)

    def distill_terms(s, p, m):
        att = attention_loss(s.attention[-1], t_trace.attention[-1], m)
        hid = nce_hidden_loss(s.hidden[-1], t_trace.hidden[-1].data, queue, p, 1.0, "token", m)[0]
        return att, hid

    def eq8(*xs):
        *ps, p = xs
        return with_params(ps, lambda s: pretrain_total(dict(
            mlm=mlm_loss(s, TaskHead.from_params(student.params, "mlm_vocab"), mlm_plans)[0],
            itm=itm_loss(s, TaskHead.from_params(student.params, "itm_binary"), np.array([1, 0])),
            **dict(zip(("att", "hid"), distill_terms(s, p, batch.pad_mask)))), cfg))

    z_t = frozen.params["head.qa.w"].data
    def eq9(*xs):
        *ps, p = xs

        def total(s):
            ce, z = answer_loss(s, TaskHead.from_params(student.params, "answer_classifier"), [0, 2])
            att, hid = distill_terms(s, p, batch.pad_mask)
            zt = t_trace.pooled_cls.data @ z_t
            return finetune_total(dict(ce=ce, cls=classification_loss(z, zt), att=att, hid=hid), cfg)

        return with_params(ps, total)

    inputs = lambda: [student.params[n] for n in names] + [Tensor(rng.normal(size=(6, 8)))]
    cases += [("pre-training total", eq8, inputs()), ("fine-tuning total", eq9, inputs())]
    return cases


def test_c1_gradient_suite(criterion):
    t0 = time.perf_counter()
    errors = {name: grad_check(f, xs, max_coords=24) for name, f, xs in _gradient_cases()}
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    criterion(1, errors[worst] < 1e-4 and elapsed < 2.0,
              f"{len(errors)} losses, max rel err {errors[worst]:.1e} ({worst}), {elapsed:.2f}s")


# -- 2. closed-form oracles ---------------------------------------------------------------

def test_c2_closed_form_oracles(criterion):
    t = lambda a: Tensor(np.asarray(a, dtype=np.float64))
    got = {}
    q = SampleQueue(np.array([[0.0, 1.0]], np.float32))
    got["nce K=1"] = (float(nce_hidden_loss(t([[1.0, 0.0]]), np.array([[1.0, 0.0]]), q, t(np.eye(2)), 1.0)[0].data),
                      math.log(1 + math.e) - 1.0)
    for K in (1, 7, 64):
        u = np.array([0.6, 0.8])
        qk = SampleQueue(np.tile(u, (K, 1)).astype(np.float32))
        got[f"nce uniform K={K}"] = (float(nce_hidden_loss(t([u]), u[None], qk, t(np.eye(2)), 1.0)[0].data),
                                     math.log(K + 1))
    head = TaskHead("itm_binary", t(np.zeros((3, 1))), t(np.zeros(1)))
    from vldistill.transformer import ForwardTrace
    pooled = t(np.ones((1, 3)))
    got["itm ln 2"] = (float(itm_loss(ForwardTrace([pooled], [], pooled, None), head, 1).data), math.log(2))
    got["soft labels ln 2"] = (float(classification_loss(t([0.0, 0.0]), np.zeros(2)).data), math.log(2))
    V = 50
    from vldistill.objectives import MaskingPlan
    h = t(np.zeros((1, 3, 4)))
    mlm_head = TaskHead("mlm_vocab", t(np.zeros((4, V))), t(np.zeros(V)))
    plan = MaskingPlan(np.array([1]), np.array([7]), "m")
    got["mlm ln V"] = (float(mlm_loss(ForwardTrace([h], [], None, None), mlm_head, plan)[0].data), math.log(V))
    a_s = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    got["attention 0.25"] = (float(attention_loss(t(a_s), np.full((1, 2, 2), 0.5), np.ones(2, bool)).data), 0.25)
    worst = max(abs(a - b) for a, b in got.values())
    criterion(2, worst < 1e-5 and abs(got["nce K=1"][0] - 0.3133) < 1e-4,
              f"{len(got)} closed forms, max abs err {worst:.1e}")


# -- 3. degradation equality ------------------------------------------------------------

def test_c3_zero_weights_equal_plain_vlp(desk, adapted, criterion):
    train = desk[0]
    cfg = budget("student", steps=25)
    before = dumps(adapted)
    plain = train_vlp(model_config_for("student", train, cfg), train, cfg)
    off = distill_pretrain(adapted, None, train, DistillConfig(alpha=0.0, beta=0.0), cfg)
    distill_pretrain(adapted, None, train, DistillConfig(queue_size=64), cfg.with_(steps=5))
    same_log = off.metrics.dumps() == plain.metrics.dumps()
    # the distilled checkpoint also carries the (untouched) projection heads
    model_params = {k: v for k, v in off.params.items() if not k.startswith("distill.")}
    same_params = model_params.keys() == plain.params.keys() and all(
        np.array_equal(v, plain.params[k]) for k, v in model_params.items())
    criterion(3, same_log and same_params and dumps(adapted) == before,
              f"metrics identical: {same_log}, weights identical: {same_params}, "
              f"teacher bytes unchanged: {dumps(adapted) == before}")


# -- 4. queue semantics -----------------------------------------------------------------

def test_c4_queue_semantics(criterion):
    rng = np.random.default_rng(4)
    K, d = 97, 3
    q = init_queue(K, d, Rng(4, "queue"))
    history = list(q.snapshot())
    counter = 0
    for _ in range(10_000):
        n = int(rng.integers(1, K + 1))
        batch = (counter + np.arange(n * d, dtype=np.float32)).reshape(n, d)
        counter += n * d
        queue_update(q, batch)
        history.extend(batch)
    fifo_ok = np.array_equal(q.snapshot(), np.asarray(history[-K:]))

    s, t = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    phi = Tensor(rng.normal(size=(3, 3)))
    full = float(nce_hidden_loss(Tensor(s), t, q, phi, 0.7)[0].data)
    cuts = np.sort(rng.choice(np.arange(1, 12), 3, replace=False))
    parts = np.split(np.arange(12), cuts)
    split = sum(float(nce_hidden_loss(Tensor(s[p]), t[p], q, phi, 0.7)[0].data) * len(p) for p in parts) / 12
    # a fixed anchor's loss does not depend on its batch mates: 2 L([a, b]) - L([b]) = L([a])
    nce = lambda idx: float(nce_hidden_loss(Tensor(s[idx]), t[idx], q, phi, 0.7)[0].data)
    anchor_gap = max(abs(2 * nce([0, j]) - nce([j]) - nce([0])) for j in range(1, 12))
    ok = fifo_ok and abs(full - split) < 1e-9 and anchor_gap < 1e-9
    criterion(4, ok, f"FIFO oracle over 10000 enqueues: {fifo_ok}, "
                     f"partition gap {abs(full - split):.1e}, anchor gap {anchor_gap:.1e}")


# -- 5-8. directional trends --------------------------------------------------------------

def test_c5_loss_ablation_trend(students, criterion):
    t0 = time.process_time()
    means = {row: students.mean("adapted", row) for row in TREND_ROWS}
    cpu = sum(v for (t, r, q, s), v in students.cpu.items() if t == "adapted" and q is None)
    ordered = means["vlp"] < means["vlp+att"] <= means["vlp+hid"] < means["vlp+both"]
    gain = means["vlp+both"] - means["vlp"]
    detail = ", ".join(f"{k} {v:.4f}" for k, v in means.items())
    criterion(5, ordered and gain >= 0.01 and cpu < 600,
              f"{detail}; both - vlp = {100 * gain:+.2f} pts; {cpu:.0f}s CPU "
              f"({time.process_time() - t0:.0f}s this test)")


def test_c6_queue_size_trend(students, criterion):
    means = {k: students.mean("adapted", "vlp+hid", queue_size=k) for k in (1, 64, 1024)}
    vals = list(means.values())
    ok = all(a <= b for a, b in zip(vals, vals[1:]))
    criterion(6, ok, ", ".join(f"K={k} {v:.4f}" for k, v in means.items()))


def test_c7_teacher_adaptation(desk, teacher, adapted, students, criterion):
    ev = desk[1]
    own = evaluate(teacher, ev, view=TEACHER_VIEW)["masked_token_accuracy"]
    before = evaluate(teacher, ev, view=ALIGNED_TEACHER_VIEW)["masked_token_accuracy"]
    after = evaluate(adapted, ev, view=ALIGNED_TEACHER_VIEW)["masked_token_accuracy"]
    from_adapted = students.mean("adapted", "vlp+both")
    from_original = students.mean("original", "vlp+both")
    ratio = after / own
    criterion(7, ratio >= 0.95 and from_adapted > from_original,
              f"teacher {own:.4f} on its own tokens, {before:.4f} on aligned before adaptation, "
              f"{after:.4f} after (ratio {ratio:.3f}); students {from_adapted:.4f} adapted vs "
              f"{from_original:.4f} unadapted")


def test_c8_attention_alignment(desk, adapted, students, criterion):
    ev = desk[1]
    dist = {row: float(np.mean([attention_distance(students.get("adapted", row, s)[0], adapted, ev)
                                for s in SEEDS])) for row in ("vlp", "vlp+both")}
    criterion(8, dist["vlp+both"] < dist["vlp"],
              f"last-layer attention l2 distance: distilled {dist['vlp+both']:.4f}, "
              f"not distilled {dist['vlp']:.4f}")


# -- 9. serialization -------------------------------------------------------------------

def test_c9_serialization(teacher, tmp_path, criterion):
    blob = dumps(teacher)
    round_trip = dumps(loads(blob)) == blob

    def raises(buf, err):
        try:
            loads(buf)
        except err:
            return True
        except Exception:
            return False
        return False

    bad_version = blob[:4] + bytes([99]) + blob[5:]
    cases = {
        "bad magic": raises(b"XXXX" + blob[4:], CorruptHeaderError),
        "short file": raises(blob[:6], CorruptHeaderError),
        "version": raises(bad_version, UnsupportedVersionError),
        "header length": raises(blob[:4] + blob[4:5] + (10**8).to_bytes(4, "little") + blob[9:],
                                CorruptHeaderError),
        "truncated payload": raises(blob[:-10], TruncatedPayloadError),
        "trailing bytes": raises(blob + b"\0", CorruptHeaderError),
    }
    run = lambda *argv: cli.main([str(a) for a in argv])
    fast = ["--steps", 3, "--batch-size", 4, "--corpus", tmp_path / "g/train.jsonl"]
    rc = [run("gen-data", "--out", tmp_path / "g", "--scenes", 12, "--eval-scenes", 4, "--seed", 9),
          run("train", "--out", tmp_path / "t", *fast),
          run("distill", "--out", tmp_path / "d", "--teacher", tmp_path / "t/model.ckpt", "--queue", 8, *fast),
          run("replay", tmp_path / "d/manifest.json", "--out", tmp_path / "r")]
    first = json.loads((tmp_path / "d/manifest.json").read_text())["outputs"]
    again = json.loads((tmp_path / "r/manifest.json").read_text())["outputs"]
    replay_ok = rc == [0, 0, 0, 0] and first == again
    named = all(cases.values())
    criterion(9, round_trip and named and replay_ok,
              f"save/load/save equal: {round_trip}; named errors: "
              f"{sum(cases.values())}/{len(cases)}; replay byte-exact: {replay_ok}")


# -- 10. masking and matching rates ------------------------------------------------------

def test_c10_masking_and_itm_rates(criterion):
    corpus = generate_corpus(10_000, seed=10)
    rng = Rng(10, "acceptance-mask")
    exact = skipped = 0
    for rec in corpus:
        seq = rec.sequence("light", "student")
        n = len(seq.word_positions)
        if n == 0:
            skipped += 1
            continue
        _, plan = mask_tokens(seq, rng.child(rec.scene_id))
        exact += len(plan.positions) == num_to_mask(n) == math.ceil(0.15 * n - 1e-12)
    checked = len(corpus) - skipped
    r = Rng(10, "acceptance-itm")
    mismatched = sum(itm_choose(len(corpus), r)[2] == 0 for _ in range(10_000))
    rate = mismatched / 10_000
    criterion(10, exact == checked and abs(rate - 0.5) <= 0.02,
              f"ceil(15%) rule held on {exact}/{checked} records; ITM mismatch rate {rate:.4f}")
