"""Datasets, GCD splits and two-view batch sampling.

A dataset is a plain list of :class:`Instance`. A :class:`GcdSplit` partitions
it into a labeled part (a fraction of the old-class instances) and an
unlabeled part (everything else, old and new classes). Estimators consume
the split through :func:`split_arrays`, which follows the scikit-learn
semi-supervised convention of marking unlabeled targets with ``-1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .exceptions import InvalidStateError, ResourceExhaustedError

UNLABELED = -1


@dataclass(frozen=True)
class Instance:
    instance_id: str
    class_id: int
    payload_ref: Union[str, np.ndarray]
    domain_tag: Optional[str] = None

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")


@dataclass(frozen=True)
class GcdSplit:
    labeled_ids: frozenset
    unlabeled_ids: frozenset
    old_classes: tuple
    all_classes: tuple
    seed: int

    @property
    def num_old(self) -> int:
        return len(self.old_classes)

    @property
    def num_classes(self) -> int:
        return len(self.all_classes)

    def validate(self, dataset: Sequence[Instance]) -> None:
        """Raise ``ValueError`` if the split violates any partition invariant."""
        ids = {inst.instance_id for inst in dataset}
        if self.labeled_ids & self.unlabeled_ids:
            raise ValueError("labeled and unlabeled ids overlap")
        if (self.labeled_ids | self.unlabeled_ids) != ids:
            raise ValueError("split does not cover the dataset exactly")
        old = set(self.old_classes)
        if not old <= set(self.all_classes):
            raise ValueError("old classes are not a subset of all classes")
        for inst in dataset:
            if inst.instance_id in self.labeled_ids and inst.class_id not in old:
                raise ValueError(f"labeled instance {inst.instance_id} belongs to a new class")

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "old_classes": [int(c) for c in self.old_classes],
            "all_classes": [int(c) for c in self.all_classes],
            "labeled_ids": sorted(self.labeled_ids),
            "unlabeled_ids": sorted(self.unlabeled_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GcdSplit":
        return cls(
            labeled_ids=frozenset(d["labeled_ids"]),
            unlabeled_ids=frozenset(d["unlabeled_ids"]),
            old_classes=tuple(int(c) for c in d["old_classes"]),
            all_classes=tuple(int(c) for c in d["all_classes"]),
            seed=int(d["seed"]),
        )


@dataclass
class Batch:
    ids: list
    view_a: np.ndarray
    view_b: np.ndarray
    # UNLABELED wherever labeled_mask is False
    labels: np.ndarray
    labeled_mask: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Parameters of the desk-scale synthetic stand-in for an image dataset.

    Each instance latent is ``[visual part (visual_dim), text part (text_dim)]``.
    ``visual_share`` > 1 makes groups of consecutive classes share one visual
    anchor, so they are only distinguishable through the text part;
    ``text_visibility`` scales how strongly the image encoder sees that part
    and ``visual_noise_scale`` multiplies the instance noise on the visual part.
    """

    num_classes: int = 8
    per_class: int = 20
    visual_dim: int = 16
    text_dim: int = 8
    class_margin: float = 0.5
    view_noise: float = 0.05
    instance_noise: float = 0.15
    visual_share: int = 1
    text_visibility: float = 1.0
    visual_noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.class_margin <= 0:
            raise ValueError("class_margin must be > 0")
        if self.view_noise < 0 or self.instance_noise < 0 or self.visual_noise_scale < 0:
            raise ValueError("noise radii must be non-negative")
        if self.visual_share < 1:
            raise ValueError("visual_share must be >= 1")
        if not 0 < self.text_visibility <= 1:
            raise ValueError("text_visibility must lie in (0, 1]")

    @property
    def latent_dim(self) -> int:
        return self.visual_dim + self.text_dim


@dataclass
class SyntheticOracleParams:
    """Ground-truth generator state handed to the synthetic encoder backend."""

    visual_anchors: np.ndarray
    text_anchors: np.ndarray
    class_names: list
    text_visibility: float = 1.0
    visual_noise_scale: float = 1.0
    seed: int = 0
    spec: Optional[SyntheticDatasetSpec] = field(default=None, repr=False)

    @property
    def latent_anchors(self) -> np.ndarray:
        return np.hstack([self.visual_anchors, self.text_anchors])


class UniformNoiseAugment:
    """Additive uniform noise of a fixed radius, drawn independently per call."""

    def __init__(self, radius: float = 0.0):
        if radius < 0:
            raise ValueError("radius must be non-negative")
        self.radius = float(radius)

    def __call__(self, payloads: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        payloads = np.asarray(payloads, dtype=np.float64)
        if self.radius == 0:
            return payloads.copy()
        return payloads + rng.uniform(-self.radius, self.radius, size=payloads.shape)


def _sample_anchors(n, dim, margin, rng, max_tries=1000):
    for _ in range(max_tries):
        a = rng.standard_normal((n, dim))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        if n < 2:
            return a
        d = np.linalg.norm(a[:, None, :] - a[None, :, :], axis=-1)
        if d[np.triu_indices(n, 1)].min() >= margin:
            return a
    raise ResourceExhaustedError(
        f"could not place {n} anchors in {dim} dims with pairwise distance >= {margin} "
        f"after {max_tries} attempts; lower class_margin or raise the dimension"
    )


def make_synthetic_dataset(spec: SyntheticDatasetSpec):
    """Draw class anchors and instances; returns ``(instances, oracle_params)``."""
    rng = np.random.default_rng(spec.seed)
    n_groups = math.ceil(spec.num_classes / spec.visual_share)
    group_anchors = _sample_anchors(n_groups, spec.visual_dim, spec.class_margin, rng)
    visual = group_anchors[np.arange(spec.num_classes) // spec.visual_share]
    text = _sample_anchors(spec.num_classes, spec.text_dim, spec.class_margin, rng)
    anchors = np.hstack([visual, text])

    width = len(str(spec.num_classes * spec.per_class - 1))
    instances = []
    for c in range(spec.num_classes):
        for _ in range(spec.per_class):
            noise = rng.uniform(-spec.instance_noise, spec.instance_noise, size=spec.latent_dim)
            noise[: spec.visual_dim] *= spec.visual_noise_scale
            idx = len(instances)
            instances.append(Instance(f"s{idx:0{width}d}", c, anchors[c] + noise))
    params = SyntheticOracleParams(
        visual_anchors=visual,
        text_anchors=text,
        class_names=[f"class_{c}" for c in range(spec.num_classes)],
        text_visibility=spec.text_visibility,
        seed=spec.seed,
        spec=spec,
    )
    return instances, params


def build_gcd_split(
    dataset: Sequence[Instance],
    old_class_count: int,
    labeled_fraction: float = 0.5,
    seed: int = 0,
    first_n_old: bool = False,
) -> GcdSplit:
    """Partition ``dataset`` into labeled old-class and unlabeled instances.

    Old classes are the first ``old_class_count`` class ids when
    ``first_n_old`` is set, otherwise a seeded sample without replacement.
    Each old class c contributes ``floor(labeled_fraction * n_c)`` labeled
    instances.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if not 0.0 <= labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must lie in [0, 1], got {labeled_fraction}")
    classes = sorted({inst.class_id for inst in dataset})
    if old_class_count > len(classes) or old_class_count < 0:
        raise ValueError(
            f"old_class_count={old_class_count} exceeds the {len(classes)} classes present"
        )
    rng = np.random.default_rng(seed)
    if first_n_old:
        old = classes[:old_class_count]
    else:
        old = sorted(int(c) for c in rng.choice(classes, size=old_class_count, replace=False))

    by_class: dict = {}
    for inst in sorted(dataset, key=lambda i: i.instance_id):
        by_class.setdefault(inst.class_id, []).append(inst.instance_id)
    labeled = set()
    for c in old:
        members = by_class[c]
        n_lab = math.floor(labeled_fraction * len(members))
        order = rng.permutation(len(members))[:n_lab]
        labeled.update(members[i] for i in order)
    all_ids = {inst.instance_id for inst in dataset}
    if len(all_ids) != len(dataset):
        raise ValueError("instance ids are not unique")
    return GcdSplit(
        labeled_ids=frozenset(labeled),
        unlabeled_ids=frozenset(all_ids - labeled),
        old_classes=tuple(old),
        all_classes=tuple(classes),
        seed=seed,
    )


def payload_matrix(dataset: Sequence[Instance]) -> np.ndarray:
    """Stack inline latent payloads into an ``(n, latent_dim)`` float array."""
    rows = []
    for inst in dataset:
        if isinstance(inst.payload_ref, str):
            raise ValueError(
                f"instance {inst.instance_id} has a path payload; decode it with an image backend"
            )
        rows.append(np.asarray(inst.payload_ref, dtype=np.float64))
    return np.vstack(rows)


def dataset_payloads(dataset: Sequence[Instance]):
    """Path list for file-backed datasets, otherwise the latent matrix."""
    refs = [inst.payload_ref for inst in dataset]
    if refs and all(isinstance(r, str) for r in refs):
        return refs
    return payload_matrix(dataset)


def split_arrays(dataset: Sequence[Instance], split: GcdSplit):
    """Return ``(X, y_semi, y_true, ids)`` in dataset order.

    ``y_semi`` holds the class id for labeled instances and ``UNLABELED``
    elsewhere, ready for ``estimator.fit(X, y_semi)``. File-backed datasets
    yield a path list for ``X``.
    """
    X = dataset_payloads(dataset)
    y_true = np.array([inst.class_id for inst in dataset], dtype=np.int64)
    ids = [inst.instance_id for inst in dataset]
    y_semi = np.array(
        [inst.class_id if inst.instance_id in split.labeled_ids else UNLABELED for inst in dataset],
        dtype=np.int64,
    )
    return X, y_semi, y_true, ids


def sample_batch(
    split: GcdSplit,
    dataset: Sequence[Instance],
    batch_size: int,
    rng: np.random.Generator,
    augment=None,
) -> Batch:
    """Draw ``batch_size`` instances uniformly from the whole split, two views each.

    Instances are drawn without replacement when the dataset is large enough,
    with replacement otherwise.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not dataset:
        raise InvalidStateError("cannot sample from an empty dataset")
    augment = augment or UniformNoiseAugment(0.0)
    n = len(dataset)
    idx = rng.choice(n, size=batch_size, replace=batch_size > n)
    chosen = [dataset[i] for i in idx]
    X = payload_matrix(chosen)
    mask = np.array([inst.instance_id in split.labeled_ids for inst in chosen])
    labels = np.where(mask, [inst.class_id for inst in chosen], UNLABELED).astype(np.int64)
    return Batch(
        ids=[inst.instance_id for inst in chosen],
        view_a=augment(X, rng),
        view_b=augment(X, rng),
        labels=labels,
        labeled_mask=mask,
    )


def iter_epoch_batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 2):
    """Yield index arrays covering a fresh permutation of ``range(n)``.

    A trailing batch smaller than ``min_size`` is dropped.
    """
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= min_size:
            yield idx


# --- manifest / split files -------------------------------------------------

def write_manifest(dataset: Sequence[Instance], path, hide_labels_of=None) -> None:
    """Write one JSON record per line.

    ``hide_labels_of`` is an id set whose ``class_id`` is exported as null.
    """
    hidden = hide_labels_of or set()
    path = Path(path)
    try:
        with path.open("w") as fh:
            for inst in dataset:
                payload = inst.payload_ref
                if not isinstance(payload, str):
                    payload = [float(v) for v in np.asarray(payload)]
                rec = {
                    "id": inst.instance_id,
                    "class_id": None if inst.instance_id in hidden else int(inst.class_id),
                    "payload": payload,
                }
                if inst.domain_tag is not None:
                    rec["domain"] = inst.domain_tag
                fh.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> list:
    path = Path(path)
    out = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        missing = {"id", "class_id", "payload"} - set(rec)
        if missing:
            raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        if rec["class_id"] is None:
            raise ValueError(f"{path}:{lineno}: class_id is null; ground truth required here")
        payload = rec["payload"]
        if not isinstance(payload, str):
            payload = np.asarray(payload, dtype=np.float64)
        out.append(Instance(str(rec["id"]), int(rec["class_id"]), payload, rec.get("domain")))
    return out


def write_split(split: GcdSplit, path) -> None:
    path = Path(path)
    try:
        path.write_text(json.dumps(split.to_dict(), indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write split file {path}: {exc}") from exc


def read_split(path) -> GcdSplit:
    path = Path(path)
    if not path.exists():
        raise InvalidStateError(f"split file {path} does not exist; run the `split` command first")
    return GcdSplit.from_dict(json.loads(path.read_text()))
