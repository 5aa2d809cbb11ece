"""Synthetic scenes, simulated detectors and Word-Tag-Image token sequences.

A scene is a handful of labelled boxes in the unit square. Two detector
profiles look at the same scene and disagree (jitter, misses, false
positives, confidence noise, class confusion), which is the source of the
teacher/student token misalignment that ``align_inputs`` removes.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import Rng

__all__ = [
    "Vocab",
    "VOCAB",
    "PAD", "CLS", "SEP", "MASK", "UNK",
    "SPECIAL", "WORD", "TAG", "VISUAL",
    "GenConfig",
    "SceneObject",
    "SyntheticScene",
    "RegionProposal",
    "DetectorProfile",
    "ZERO_NOISE", "STRONG", "LIGHT",
    "FeatureConfig",
    "Limits",
    "TokenSequence",
    "Batch",
    "ConfigError",
    "generate_scene",
    "make_caption",
    "answer_for",
    "detect",
    "extract_features",
    "position_coords",
    "order_tokens",
    "assemble_triple",
    "align_inputs",
    "nonaligned_inputs",
    "collate",
    "Record",
    "build_record",
    "generate_corpus",
    "write_corpus",
    "read_corpus",
    "SCHEMA_VERSION",
]


class ConfigError(ValueError):
    """Invalid generator, detector or pipeline configuration."""


# -- vocabulary -----------------------------------------------------------------

SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")
PAD, CLS, SEP, MASK, UNK = range(5)

CLASS_NAMES = (
    "person", "dog", "cat", "horse", "bird", "car", "bus", "bike", "train", "boat",
    "plane", "truck", "tree", "bench", "chair", "table", "sofa", "bed", "lamp", "cup",
    "bottle", "bowl", "pizza", "cake", "apple", "banana", "clock", "vase", "book", "phone",
    "laptop", "tv", "kite", "ball", "bat", "glove", "skis", "board", "sign", "hydrant",
)
SIZE_WORDS = ("big", "small")
RELATION_WORDS = ("left", "right", "above", "below")
FILLER_WORDS = ("photo", "image", "picture")
QUESTION_WORDS = ("what", "main")

# modality labels per position
SPECIAL, WORD, TAG, VISUAL = 0, 1, 2, 3


class Vocab:
    def __init__(self, num_classes: int = len(CLASS_NAMES)):
        if num_classes <= 0:
            raise ConfigError("class vocabulary is empty")
        if num_classes > len(CLASS_NAMES):
            names = tuple(f"obj{i}" for i in range(num_classes))
        else:
            names = CLASS_NAMES[:num_classes]
        self.class_names = names
        self.tokens = (list(SPECIAL_TOKENS) + list(names) + list(SIZE_WORDS)
                       + list(RELATION_WORDS) + list(FILLER_WORDS) + list(QUESTION_WORDS))
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.class_offset = len(SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self.tokens)

    def class_token(self, class_id: int) -> int:
        return self.class_offset + class_id

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@functools.lru_cache(maxsize=None)
def _vocab(num_classes: int) -> Vocab:
    return Vocab(num_classes)


VOCAB = _vocab(len(CLASS_NAMES))


# -- scenes -----------------------------------------------------------------------

@dataclass(frozen=True)
class GenConfig:
    num_classes: int = 40
    min_objects: int = 2
    max_objects: int = 4
    class_probs: tuple | None = None
    size_range: tuple = (0.15, 0.5)
    distractor_rate: float = 0.25
    caption_objects: int = 3
    num_answers: int = 8
    big_area: float = 0.09

    def __post_init__(self):
        if self.num_classes <= 0:
            raise ConfigError("class vocabulary is empty")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError(f"bad object range [{self.min_objects}, {self.max_objects}]")
        if self.class_probs is not None:
            p = np.asarray(self.class_probs, dtype=float)
            if p.shape != (self.num_classes,) or (p < 0).any() or not math.isclose(p.sum(), 1.0):
                raise ConfigError("class_probs must be a distribution over num_classes")

    @property
    def vocab(self) -> Vocab:
        return _vocab(self.num_classes)


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    center: tuple
    size: tuple
    salience: float

    @property
    def box(self) -> tuple:
        (cx, cy), (w, h) = self.center, self.size
        return (cx - w / 2, cy - h / 2, w, h)


@dataclass(frozen=True)
class SyntheticScene:
    scene_id: int
    objects: tuple
    latent_seed: int


def generate_scene(rng: Rng, gen_config: GenConfig, scene_id: int = 0) -> SyntheticScene:
    """Draw a scene from ``rng``; identical rng streams give identical scenes."""
    g = gen_config
    r = rng.child("scene", scene_id)
    n = int(r.integers(g.min_objects, g.max_objects + 1))
    probs = None if g.class_probs is None else np.asarray(g.class_probs, dtype=float)
    classes = r.choice(g.num_classes, size=n, p=probs)
    lo, hi = g.size_range
    objects = []
    for k in range(n):
        w, h = r.uniform(lo, hi, size=2)
        cx = r.uniform(w / 2, 1 - w / 2)
        cy = r.uniform(h / 2, 1 - h / 2)
        sal = 1.0 - r.uniform(0.0, 0.9)  # (0.1, 1]
        objects.append(SceneObject(int(classes[k]), (float(cx), float(cy)),
                                   (float(w), float(h)), float(sal)))
    latent = int(r.integers(0, 2**63 - 1))
    return SyntheticScene(scene_id, tuple(objects), latent)


def _by_salience(scene: SyntheticScene) -> list[SceneObject]:
    return sorted(scene.objects, key=lambda o: -o.salience)


def _relation(a: SceneObject, b: SceneObject) -> str:
    dx = b.center[0] - a.center[0]
    dy = b.center[1] - a.center[1]
    if abs(dx) >= abs(dy):
        return "right" if dx > 0 else "left"
    return "below" if dy > 0 else "above"


def make_caption(scene: SyntheticScene, gen_config: GenConfig, rng: Rng) -> list[int]:
    """Template caption: ``[filler] size class (relation size class)*``, most salient first."""
    g, v = gen_config, gen_config.vocab
    words: list[str] = []
    r = rng.child("caption", scene.scene_id)
    if r.random() < g.distractor_rate:
        words.append(FILLER_WORDS[int(r.integers(len(FILLER_WORDS)))])
    ranked = _by_salience(scene)[: g.caption_objects]
    prev = None
    for obj in ranked:
        if prev is not None:
            words.append(_relation(prev, obj))
        words.append("big" if obj.size[0] * obj.size[1] > g.big_area else "small")
        words.append(v.class_names[obj.class_id])
        prev = obj
    return [v.id(w) for w in words]


def answer_for(scene: SyntheticScene, gen_config: GenConfig) -> int:
    """Toy QA target: group of the most salient object's class."""
    return _by_salience(scene)[0].class_id % gen_config.num_answers


# -- detectors ----------------------------------------------------------------------

@dataclass(frozen=True)
class RegionProposal:
    box: tuple
    confidence: float
    predicted_class: int
    source_detector: str


@dataclass(frozen=True)
class DetectorProfile:
    name: str
    box_jitter: float = 0.0
    miss_rate: float = 0.0
    false_positives: float = 0.0   # Poisson mean per scene
    confidence_noise: float = 0.0
    class_confusion: float = 0.0
    scale_bias: float = 1.0        # systematic box growth/shrink

    def with_(self, **kw) -> "DetectorProfile":
        return dataclasses.replace(self, **kw)


ZERO_NOISE = DetectorProfile("zero")
STRONG = DetectorProfile("strong", box_jitter=0.01, miss_rate=0.02, false_positives=0.1,
                         confidence_noise=0.03, class_confusion=0.02)
LIGHT = DetectorProfile("light", box_jitter=0.03, miss_rate=0.03, false_positives=0.6,
                        confidence_noise=0.05, class_confusion=0.05, scale_bias=1.25)
PROFILES = {p.name: p for p in (ZERO_NOISE, STRONG, LIGHT)}

_MIN_SIDE = 0.02


def _clip_box(x, y, w, h) -> tuple:
    w = min(max(w, _MIN_SIDE), 1.0)
    h = min(max(h, _MIN_SIDE), 1.0)
    x = min(max(x, 0.0), 1.0 - w)
    y = min(max(y, 0.0), 1.0 - h)
    return (float(x), float(y), float(w), float(h))


def detect(scene: SyntheticScene, detector_config: DetectorProfile, rng: Rng,
           num_classes: int = 40) -> list[RegionProposal]:
    p = detector_config
    r = rng.child("detect", p.name, scene.scene_id)
    out = []
    for obj in scene.objects:
        miss, jit, cn, conf_u, cls_u, cls_alt = (
            r.random(), r.normal(4, scale=1.0), r.normal(), r.random(), r.random(),
            int(r.integers(num_classes)),
        )
        if miss < p.miss_rate:
            continue
        (cx, cy), (w, h) = obj.center, obj.size
        w, h = w * p.scale_bias, h * p.scale_bias
        cx, cy = cx + p.box_jitter * jit[0], cy + p.box_jitter * jit[1]
        w, h = w * math.exp(p.box_jitter * jit[2]), h * math.exp(p.box_jitter * jit[3])
        if p.box_jitter == 0.0 and p.scale_bias == 1.0:
            box = obj.box
        else:
            box = _clip_box(cx - w / 2, cy - h / 2, w, h)
        conf = obj.salience + p.confidence_noise * cn
        conf = float(min(max(conf, 0.01), 1.0))
        cls = cls_alt if cls_u < p.class_confusion else obj.class_id
        out.append(RegionProposal(box, conf, int(cls), p.name))
    n_fp = int(r.gen.poisson(p.false_positives)) if p.false_positives > 0 else 0
    for _ in range(n_fp):
        w, h = r.uniform(0.05, 0.3, size=2)
        x, y = r.uniform(0, 1 - w), r.uniform(0, 1 - h)
        conf = float(r.uniform(0.05, 0.45))
        out.append(RegionProposal(_clip_box(x, y, w, h), conf,
                                  int(r.integers(num_classes)), p.name))
    return out


# -- region features ------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureConfig:
    teacher_dim: int = 48
    student_dim: int = 16
    seed: int = 20210701

    def dim(self, role: str) -> int:
        if role == "teacher":
            return self.teacher_dim
        if role == "student":
            return self.student_dim
        raise ConfigError(f"unknown extractor role {role!r}")


@functools.lru_cache(maxsize=16)
def _projection(seed: int, role: str, num_classes: int, dim: int) -> np.ndarray:
    # row num_classes is the background embedding
    return Rng(seed, f"extractor-{role}").normal((num_classes + 1, dim)).astype(np.float32)


def position_coords(box: tuple) -> np.ndarray:
    x, y, w, h = box
    return np.array([x, y, w, h, x + w / 2, y + h / 2], dtype=np.float32)


def _overlap(a: tuple, b: tuple) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    return max(iw, 0.0) * max(ih, 0.0)


def extract_features(scene: SyntheticScene, proposals: Sequence[RegionProposal],
                     extractor_role: str, num_classes: int = 40,
                     feature_config: FeatureConfig = FeatureConfig()):
    """Per proposal: (class-mixture embedding under the box, 6 position coordinates)."""
    dim = feature_config.dim(extractor_role)
    proj = _projection(feature_config.seed, extractor_role, num_classes, dim)
    out = []
    for prop in proposals:
        area = prop.box[2] * prop.box[3]
        mix = np.zeros(num_classes + 1, dtype=np.float64)
        for obj in scene.objects:
            mix[obj.class_id] += _overlap(prop.box, obj.box) / area
        covered = mix[:num_classes].sum()
        if covered > 1.0:
            mix[:num_classes] /= covered
            covered = 1.0
        mix[num_classes] = 1.0 - covered
        feat = (mix @ proj.astype(np.float64)).astype(np.float32)
        out.append((feat, position_coords(prop.box)))
    return out


def order_tokens(proposals: Sequence) -> list:
    """Stable sort by descending confidence; ties keep input order."""
    return sorted(proposals, key=lambda p: -p.confidence)


# -- token sequences ----------------------------------------------------------------------

@dataclass(frozen=True)
class Limits:
    cap_len: int = 8
    tag_len: int = 4
    vis_len: int = 6

    @property
    def total(self) -> int:
        return 3 + self.cap_len + self.tag_len + self.vis_len

    @classmethod
    def full_scale(cls) -> "Limits":
        return cls(20, 15, 50)


@dataclass
class TokenSequence:
    """One Word-Tag-Image input laid out as ``[CLS] w [SEP] q [SEP] v [PAD]...``."""

    word_ids: np.ndarray
    tag_ids: np.ndarray
    visual_features: np.ndarray    # [n_vis, d_feat]
    visual_coords: np.ndarray      # [n_vis, 6]
    boxes: list
    confidences: np.ndarray
    limits: Limits
    ids: np.ndarray = field(default=None)
    modality: np.ndarray = field(default=None)
    segment: np.ndarray = field(default=None)
    pad_mask: np.ndarray = field(default=None)
    visual: np.ndarray = field(default=None)   # [T, d_feat + 6], zero off visual rows

    def __post_init__(self):
        if self.ids is None:
            self._layout()

    def _layout(self):
        L = self.limits
        T = L.total
        nw, nq, nv = len(self.word_ids), len(self.tag_ids), len(self.visual_features)
        ids = np.full(T, PAD, dtype=np.int64)
        mod = np.full(T, SPECIAL, dtype=np.int8)
        seg = np.full(T, 2, dtype=np.int8)
        pos = 0
        ids[pos] = CLS
        seg[pos] = 0
        pos += 1
        ids[pos:pos + nw] = self.word_ids
        mod[pos:pos + nw] = WORD
        seg[pos:pos + nw] = 0
        pos += nw
        ids[pos] = SEP
        seg[pos] = 0
        pos += 1
        ids[pos:pos + nq] = self.tag_ids
        mod[pos:pos + nq] = TAG
        seg[pos:pos + nq + 1] = 1
        pos += nq
        ids[pos] = SEP
        pos += 1
        mod[pos:pos + nv] = VISUAL
        d_in = self.visual_features.shape[1] + 6 if nv else self.visual_features.shape[-1] + 6
        vis = np.zeros((T, d_in), dtype=np.float32)
        if nv:
            vis[pos:pos + nv] = np.concatenate([self.visual_features, self.visual_coords], axis=1)
        pos += nv
        pad = np.zeros(T, dtype=bool)
        pad[:pos] = True
        self.ids, self.modality, self.segment, self.pad_mask, self.visual = ids, mod, seg, pad, vis

    @property
    def length(self) -> int:
        return self.limits.total

    @property
    def word_positions(self) -> np.ndarray:
        return np.flatnonzero(self.modality == WORD)

    @property
    def visual_positions(self) -> np.ndarray:
        return np.flatnonzero(self.modality == VISUAL)

    def with_words(self, word_ids) -> "TokenSequence":
        word_ids = np.asarray(word_ids, dtype=np.int64)[: self.limits.cap_len]
        return TokenSequence(word_ids, self.tag_ids, self.visual_features, self.visual_coords,
                             self.boxes, self.confidences, self.limits)

    def copy(self) -> "TokenSequence":
        return dataclasses.replace(self, ids=self.ids.copy())


def assemble_triple(caption_ids, proposals: Sequence[RegionProposal], features,
                    limits: Limits = Limits(), vocab: Vocab = VOCAB,
                    feature_dim: int | None = None) -> TokenSequence:
    """Truncate each segment to its limit and lay out the triple.

    ``proposals``/``features`` are reordered by confidence here, so the kept
    tags and visual tokens are always the highest-confidence ones.
    """
    order = sorted(range(len(proposals)), key=lambda i: -proposals[i].confidence)
    props = [proposals[i] for i in order]
    feats = [features[i] for i in order]
    words = np.asarray(list(caption_ids)[: limits.cap_len], dtype=np.int64)
    tags = np.asarray([vocab.class_token(p.predicted_class) for p in props[: limits.tag_len]],
                      dtype=np.int64)
    kept = feats[: limits.vis_len]
    if kept:
        vf = np.stack([f for f, _ in kept]).astype(np.float32)
        vc = np.stack([c for _, c in kept]).astype(np.float32)
    else:
        dim = feature_dim if feature_dim is not None else 0
        vf = np.zeros((0, dim), np.float32)
        vc = np.zeros((0, 6), np.float32)
    return TokenSequence(words, tags, vf, vc, [p.box for p in props[: limits.vis_len]],
                         np.asarray([p.confidence for p in props[: limits.vis_len]]), limits)


def align_inputs(scene: SyntheticScene, rng: Rng, caption_ids, limits: Limits = Limits(),
                 num_classes: int = 40, feature_config: FeatureConfig = FeatureConfig(),
                 profile: DetectorProfile = LIGHT):
    """Teacher and student sequences built from the *same* light-detector proposals."""
    props = order_tokens(detect(scene, profile, rng, num_classes))
    vocab = _vocab(num_classes)
    seqs = []
    for role in ("teacher", "student"):
        feats = extract_features(scene, props, role, num_classes, feature_config)
        seqs.append(assemble_triple(caption_ids, props, feats, limits, vocab,
                                    feature_config.dim(role)))
    return seqs[0], seqs[1]


def nonaligned_inputs(scene: SyntheticScene, rng: Rng, caption_ids, limits: Limits = Limits(),
                      num_classes: int = 40, feature_config: FeatureConfig = FeatureConfig()):
    """Baseline without alignment: the teacher keeps its own strong-detector proposals."""
    vocab = _vocab(num_classes)
    t_props = order_tokens(detect(scene, STRONG, rng, num_classes))
    s_props = order_tokens(detect(scene, LIGHT, rng, num_classes))
    t_feats = extract_features(scene, t_props, "teacher", num_classes, feature_config)
    s_feats = extract_features(scene, s_props, "student", num_classes, feature_config)
    return (assemble_triple(caption_ids, t_props, t_feats, limits, vocab,
                            feature_config.teacher_dim),
            assemble_triple(caption_ids, s_props, s_feats, limits, vocab,
                            feature_config.student_dim))


@dataclass
class Batch:
    ids: np.ndarray
    visual: np.ndarray
    modality: np.ndarray
    segment: np.ndarray
    pad_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def collate(seqs: Sequence[TokenSequence]) -> Batch:
    return Batch(
        ids=np.stack([s.ids for s in seqs]),
        visual=np.stack([s.visual for s in seqs]),
        modality=np.stack([s.modality for s in seqs]),
        segment=np.stack([s.segment for s in seqs]),
        pad_mask=np.stack([s.pad_mask for s in seqs]),
    )


# -- corpus records -------------------------------------------------------------------------

SCHEMA_VERSION = 1


@dataclass
class Record:
    """One corpus line: scene, caption, answer and both detectors' proposals + features."""

    scene: SyntheticScene
    caption: list
    answer: int
    proposals: dict          # detector name -> list[RegionProposal], confidence-ordered
    features: dict           # "light/teacher" etc. -> np.ndarray [n, d_feat]
    num_classes: int = 40

    @property
    def scene_id(self) -> int:
        return self.scene.scene_id

    def sequence(self, detector: str, role: str, limits: Limits = Limits(),
                 caption=None) -> TokenSequence:
        props = self.proposals[detector]
        feats = self.features[f"{detector}/{role}"]
        pairs = [(feats[i], position_coords(p.box)) for i, p in enumerate(props)]
        return assemble_triple(self.caption if caption is None else caption, props, pairs,
                               limits, _vocab(self.num_classes), feats.shape[1])

    # -- serialisation ----------------------------------------------------
    def to_json(self) -> dict:
        def f32(xs):
            return [float(np.float32(x)) for x in xs]

        return {
            "schema_version": SCHEMA_VERSION,
            "scene_id": self.scene.scene_id,
            "latent_seed": self.scene.latent_seed,
            "num_classes": self.num_classes,
            "objects": [
                {"class_id": o.class_id, "center": list(o.center), "size": list(o.size),
                 "salience": o.salience}
                for o in self.scene.objects
            ],
            "caption": [int(c) for c in self.caption],
            "answer": int(self.answer),
            "proposals": {
                det: [{"box": list(p.box), "confidence": p.confidence,
                       "class": p.predicted_class} for p in props]
                for det, props in self.proposals.items()
            },
            "features": {k: [f32(row) for row in v] for k, v in self.features.items()},
            "feature_dims": {k: int(v.shape[1]) for k, v in self.features.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Record":
        version = obj.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported corpus schema_version {version!r}")
        scene = SyntheticScene(
            obj["scene_id"],
            tuple(SceneObject(o["class_id"], tuple(o["center"]), tuple(o["size"]), o["salience"])
                  for o in obj["objects"]),
            obj["latent_seed"],
        )
        proposals = {
            det: [RegionProposal(tuple(p["box"]), p["confidence"], p["class"], det) for p in ps]
            for det, ps in obj["proposals"].items()
        }
        dims = obj["feature_dims"]
        features = {
            k: np.asarray(rows, dtype=np.float32).reshape(len(rows), dims[k])
            for k, rows in obj["features"].items()
        }
        return cls(scene, obj["caption"], obj["answer"], proposals, features,
                   obj.get("num_classes", 40))


def build_record(scene_id: int, seed: int, gen_config: GenConfig = GenConfig(),
                 feature_config: FeatureConfig = FeatureConfig(),
                 detectors: Sequence[DetectorProfile] = (LIGHT, STRONG)) -> Record:
    rng = Rng(seed, "corpus")
    scene = generate_scene(rng, gen_config, scene_id)
    caption = make_caption(scene, gen_config, rng)
    proposals, features = {}, {}
    C = gen_config.num_classes
    for prof in detectors:
        props = order_tokens(detect(scene, prof, rng, C))
        proposals[prof.name] = props
        roles = ("teacher", "student") if prof.name == LIGHT.name else ("teacher",)
        for role in roles:
            dim = feature_config.dim(role)
            feats = extract_features(scene, props, role, C, feature_config)
            features[f"{prof.name}/{role}"] = (
                np.stack([f for f, _ in feats]) if feats else np.zeros((0, dim), np.float32)
            )
    return Record(scene, caption, answer_for(scene, gen_config), proposals, features, C)


def generate_corpus(num_scenes: int, seed: int, start_id: int = 0,
                    gen_config: GenConfig = GenConfig(),
                    feature_config: FeatureConfig = FeatureConfig(),
                    detectors: Sequence[DetectorProfile] = (LIGHT, STRONG)) -> list[Record]:
    if num_scenes <= 0:
        raise ConfigError(f"num_scenes must be positive, got {num_scenes}")
    return [build_record(start_id + i, seed, gen_config, feature_config, detectors)
            for i in range(num_scenes)]


def write_corpus(path, records: Sequence[Record]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_corpus(path) -> list[Record]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(Record.from_json(json.loads(line)))
    return out
