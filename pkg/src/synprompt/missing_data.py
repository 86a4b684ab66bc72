"""Missing-modality patterns, zero-fill masking and the synthetic two-modality task.

Missing cases are integer coded:

* ``COMPLETE`` (0): both modalities present,
* ``TEXT_MISSING`` (1): image only,
* ``IMAGE_MISSING`` (2): text only.

Dataset file format (one sample per line, JSON array, all integers base-10)::

    [id, [image token, ...], [text token, ...], [label bit, ...], [image_present, text_present]]

The label vector is the multi-hot vector (multilabel), the one-hot vector
(multiclass) or a single bit (binary). An empty file is an empty dataset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .config import KINDS, ExperimentConfig

COMPLETE, TEXT_MISSING, IMAGE_MISSING = 0, 1, 2
CASE_NAMES = {COMPLETE: "complete", TEXT_MISSING: "text-missing", IMAGE_MISSING: "image-missing"}


class DataError(ValueError):
    pass


class DatasetParseError(DataError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {reason}")


@dataclass(frozen=True)
class ModalitySample:
    id: int
    image: np.ndarray
    text: np.ndarray
    label: np.ndarray
    image_present: bool = True
    text_present: bool = True

    def __post_init__(self):
        if not (self.image_present or self.text_present):
            raise DataError(f"sample {self.id}: at least one modality must be present")

    @property
    def case(self) -> int:
        return case_of(self.image_present, self.text_present)

    def __eq__(self, other):
        if not isinstance(other, ModalitySample):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.text, other.text)
            and np.array_equal(self.label, other.label)
            and self.image_present == other.image_present
            and self.text_present == other.text_present
        )


def case_of(image_present: bool, text_present: bool) -> int:
    if image_present and text_present:
        return COMPLETE
    if image_present:
        return TEXT_MISSING
    if text_present:
        return IMAGE_MISSING
    raise DataError("both modalities absent")


class Dataset:
    """Column-oriented store of samples; text is right-padded with zeros."""

    def __init__(self, ids, image, text, text_len, labels, present):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.image = np.asarray(image, dtype=np.int64)
        self.text = np.asarray(text, dtype=np.int64)
        self.text_len = np.asarray(text_len, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.present = np.asarray(present, dtype=bool)
        n = len(self.ids)
        if n and not self.present.any(axis=1).all():
            raise DataError("every sample needs at least one present modality")
        if n and self.text.ndim != 2:
            raise DataError("text must be a 2-D padded array")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def cases(self) -> np.ndarray:
        img, txt = self.present[:, 0], self.present[:, 1]
        return np.where(img & txt, COMPLETE, np.where(img, TEXT_MISSING, IMAGE_MISSING))

    def sample(self, i: int) -> ModalitySample:
        return ModalitySample(
            id=int(self.ids[i]),
            image=self.image[i].copy(),
            text=self.text[i, : self.text_len[i]].copy(),
            label=self.labels[i].copy(),
            image_present=bool(self.present[i, 0]),
            text_present=bool(self.present[i, 1]),
        )

    def __iter__(self):
        return (self.sample(i) for i in range(len(self)))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        width = int(self.text_len[idx].max()) if len(idx) else 0
        return Dataset(
            self.ids[idx], self.image[idx], self.text[idx, :width], self.text_len[idx],
            self.labels[idx], self.present[idx],
        )

    def with_presence(self, present) -> "Dataset":
        return Dataset(self.ids, self.image, self.text, self.text_len, self.labels, present)

    def complete(self) -> "Dataset":
        return self.with_presence(np.ones_like(self.present))

    @classmethod
    def from_samples(cls, samples) -> "Dataset":
        samples = list(samples)
        if not samples:
            return cls(np.zeros(0), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0),
                       np.zeros((0, 0)), np.zeros((0, 2)))
        width = max(len(s.text) for s in samples)
        text = np.zeros((len(samples), width), dtype=np.int64)
        for i, s in enumerate(samples):
            text[i, : len(s.text)] = s.text
        return cls(
            [s.id for s in samples],
            np.stack([s.image for s in samples]),
            text,
            [len(s.text) for s in samples],
            np.stack([s.label for s in samples]),
            [[s.image_present, s.text_present] for s in samples],
        )

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self, other))


# ---------------------------------------------------------------------------
# missing patterns


@dataclass(frozen=True)
class MissingPattern:
    cases: np.ndarray
    eta: float
    kind: str
    seed: int

    def counts(self) -> dict:
        return {name: int((self.cases == c).sum()) for c, name in CASE_NAMES.items()}

    def presence(self) -> np.ndarray:
        """[n, 2] boolean (image_present, text_present)."""
        return np.stack([self.cases != IMAGE_MISSING, self.cases != TEXT_MISSING], axis=1)


def group_sizes(n: int, eta: float, kind: str) -> tuple[int, int]:
    """(text-missing count, image-missing count) under the floor rule."""
    rate = Fraction(eta).limit_denominator(10**6)
    if kind == "both":
        each = math.floor(n * rate / 2)
        return each, each
    if kind == "text":
        return math.floor(n * rate), 0
    return 0, math.floor(n * rate)


def generate_pattern(n: int, eta: float, kind: str, seed: int) -> MissingPattern:
    if not 0.0 <= eta <= 1.0:
        raise DataError(f"missing rate must lie in [0, 1], got {eta}")
    if n < 1:
        raise DataError(f"dataset size must be >= 1, got {n}")
    if kind not in KINDS:
        raise DataError(f"unknown pattern kind {kind!r}; expected one of {KINDS}")
    n_text, n_image = group_sizes(n, eta, kind)
    order = np.random.default_rng(seed).permutation(n)
    cases = np.full(n, COMPLETE, dtype=np.int64)
    cases[order[:n_text]] = TEXT_MISSING
    cases[order[n_text : n_text + n_image]] = IMAGE_MISSING
    return MissingPattern(cases=cases, eta=eta, kind=kind, seed=seed)


def apply_mask(sample: ModalitySample, case: int) -> ModalitySample:
    """Clear the presence bit of the modality removed by ``case``.

    Token content stays in the record; embedding ignores it.
    """
    if case == COMPLETE:
        return sample
    if case == TEXT_MISSING:
        if not sample.image_present:
            raise DataError(f"sample {sample.id}: removing text would leave no modality")
        return replace(sample, text_present=False)
    if case == IMAGE_MISSING:
        if not sample.text_present:
            raise DataError(f"sample {sample.id}: removing image would leave no modality")
        return replace(sample, image_present=False)
    raise DataError(f"unknown missing case {case!r}")


def apply_pattern(data: Dataset, pattern: MissingPattern) -> Dataset:
    if len(pattern.cases) != len(data):
        raise DataError(f"pattern covers {len(pattern.cases)} samples, dataset has {len(data)}")
    present = data.present & pattern.presence()
    if not present.any(axis=1).all():
        raise DataError("pattern removes the last modality of some sample")
    return data.with_presence(present)


# ---------------------------------------------------------------------------
# synthetic task


@dataclass(frozen=True)
class SyntheticTask:
    image_proto: np.ndarray  # [K, T_i]
    text_proto: np.ndarray  # [K, T_t]
    label_map: np.ndarray  # [K, C] label vector per latent class


def make_task(cfg: ExperimentConfig, seed: int) -> SyntheticTask:
    rng = np.random.default_rng([seed, 0])
    k = cfg.n_latent
    img_pool = rng.choice(cfg.codebook_size, size=cfg.proto_pool, replace=False)
    txt_pool = rng.choice(cfg.vocab_size, size=cfg.proto_pool, replace=False)
    image_proto = rng.choice(img_pool, size=(k, cfg.image_tokens))
    text_proto = rng.choice(txt_pool, size=(k, max(cfg.text_len, 1)))
    if cfg.task == "multiclass":
        label_map = np.eye(cfg.n_classes, dtype=np.int64)[np.arange(k) % cfg.n_classes]
    elif cfg.task == "binary":
        positive = rng.permutation(k)[: k // 2]
        label_map = np.isin(np.arange(k), positive).astype(np.int64)[:, None]
    else:
        c = cfg.n_classes
        label_map = np.zeros((k, c), dtype=np.int64)
        for i in range(k):
            label_map[i, rng.choice(c, size=rng.integers(1, 4), replace=False)] = 1
    return SyntheticTask(image_proto, text_proto, label_map)


def _draw(cfg: ExperimentConfig, task: SyntheticTask, n: int, rng, first_id: int) -> Dataset:
    k = cfg.n_latent
    latent = rng.integers(0, k, size=n)
    keep_img = rng.random((n, cfg.image_tokens)) < cfg.alpha_image
    noise_img = rng.integers(0, cfg.codebook_size, size=(n, cfg.image_tokens))
    image = np.where(keep_img, task.image_proto[latent], noise_img)
    t = cfg.text_len
    keep_txt = rng.random((n, t)) < cfg.alpha_text
    noise_txt = rng.integers(0, cfg.vocab_size, size=(n, t))
    text = np.where(keep_txt, task.text_proto[latent][:, :t], noise_txt)
    flip = rng.random(n) < cfg.label_noise
    label_latent = np.where(flip, rng.integers(0, k, size=n), latent)
    labels = task.label_map[label_latent]
    return Dataset(
        np.arange(first_id, first_id + n), image, text, np.full(n, t), labels,
        np.ones((n, 2), dtype=bool),
    )


def synth_dataset(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Complete-modality train/val/test splits of the synthetic task.

    Each sample draws a latent class; each image (text) position copies the
    class prototype token with probability ``alpha_image`` (``alpha_text``) and
    is uniform noise otherwise.
    """
    for name in ("alpha_image", "alpha_text"):
        a = getattr(cfg, name)
        if not 0.0 <= a <= 1.0:
            raise DataError(f"{name} must lie in [0, 1], got {a}")
    task = make_task(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    train = _draw(cfg, task, cfg.n_train, rng, 0)
    val = _draw(cfg, task, cfg.n_val, rng, cfg.n_train)
    test = _draw(cfg, task, cfg.n_test, rng, cfg.n_train + cfg.n_val)
    return train, val, test


def synth_pretrain_corpus(cfg: ExperimentConfig, seed: int) -> Dataset:
    """Extra complete-modality draws from the same task, used only for pretraining."""
    task = make_task(cfg, seed)
    rng = np.random.default_rng([seed, 2])
    return _draw(cfg, task, cfg.n_pretrain, rng, 10**9)


# ---------------------------------------------------------------------------
# line-delimited storage


def save_dataset(data: Dataset, path) -> None:
    lines = []
    for s in data:
        rec = [s.id, s.image.tolist(), s.text.tolist(), s.label.tolist(),
               [int(s.image_present), int(s.text_present)]]
        lines.append(json.dumps(rec, separators=(",", ":")))
    tmp = Path(str(path) + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines))
    tmp.replace(path)


def _int_list(x, what: str, line_no: int) -> np.ndarray:
    if not isinstance(x, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in x):
        raise DatasetParseError(line_no, f"{what} must be a list of integers")
    return np.asarray(x, dtype=np.int64)


def load_dataset(path) -> Dataset:
    samples = []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(line_no, f"malformed record ({exc.msg})") from None
            if not isinstance(rec, list) or len(rec) != 5:
                raise DatasetParseError(line_no, "expected [id, image, text, label, presence]")
            sid, image, text, label, presence = rec
            if not isinstance(sid, int):
                raise DatasetParseError(line_no, "id must be an integer")
            pres = _int_list(presence, "presence", line_no)
            if pres.shape != (2,) or not set(pres.tolist()) <= {0, 1}:
                raise DatasetParseError(line_no, "presence must be two 0/1 flags")
            try:
                samples.append(ModalitySample(
                    sid, _int_list(image, "image", line_no), _int_list(text, "text", line_no),
                    _int_list(label, "label", line_no), bool(pres[0]), bool(pres[1]),
                ))
            except DataError as exc:
                raise DatasetParseError(line_no, str(exc)) from None
    return Dataset.from_samples(samples)
