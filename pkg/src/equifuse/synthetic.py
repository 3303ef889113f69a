"""Synthetic multimodal benchmark with an exact Bayes oracle.

Each modality emits ``x = snr * mu[class] + noise`` where the class means
are unit-norm, pairwise-equidistant simplex corners embedded into the
modality's feature space by a seeded orthogonal rotation. Because the
generative model is known exactly, the Bayes-optimal classifier over any
modality subset can be brute-forced and used as an accuracy upper bound.

Per-modality signal strength is controllable, which is how the dominant
vs. weak modality regime is recreated at desk scale. Missing whole
modalities and random per-feature dropout are both supported as
evaluation-time corruptions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError
from .seeds import rng_for


@dataclass(frozen=True)
class ModalityConfig:
    name: str
    dim: int
    snr: float
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.dim < 2:
            raise ContractError(f"modality {self.name}: dim must be >= 2, got {self.dim}")
        if self.snr < 0:
            raise ContractError(f"modality {self.name}: snr must be >= 0, got {self.snr}")
        if self.noise_scale <= 0:
            raise ContractError(
                f"modality {self.name}: noise_scale must be > 0, got {self.noise_scale}"
            )


@dataclass(frozen=True)
class GeneratorSpec:
    num_classes: int
    modalities: Tuple[ModalityConfig, ...]
    samples_per_class: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.modalities) < 2:
            raise ContractError("at least two modalities are required")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate modality names: {names}")
        for m in self.modalities:
            # The simplex-corner construction needs K-1 dimensions to embed
            # K equidistant unit vectors.
            if m.dim < self.num_classes - 1:
                raise ContractError(
                    f"modality {m.name}: dim {m.dim} < num_classes-1 "
                    f"({self.num_classes - 1}) cannot hold equidistant class means"
                )

    @property
    def modality_names(self) -> Tuple[str, ...]:
        return tuple(m.name for m in self.modalities)

    def modality(self, name: str) -> ModalityConfig:
        for m in self.modalities:
            if m.name == name:
                return m
        raise ContractError(f"unknown modality {name!r}; have {self.modality_names}")

    def with_seed(self, seed: int) -> "GeneratorSpec":
        return replace(self, seed=seed)


def default_spec(seed: int = 0) -> GeneratorSpec:
    """Imbalanced three-modality default: one strong channel, two weak."""
    return GeneratorSpec(
        num_classes=4,
        modalities=(
            ModalityConfig("text", 16, 2.0, 1.0),
            ModalityConfig("audio", 8, 0.6, 1.0),
            ModalityConfig("visual", 8, 0.6, 1.0),
        ),
        samples_per_class=64,
        seed=seed,
    )


@dataclass
class MultimodalBatch:
    """Per-modality feature matrices plus labels and missingness masks."""

    features: Dict[str, np.ndarray]
    labels: np.ndarray
    present_mask: np.ndarray  # (n, |M|) bool, column order = modality order
    feature_mask: Dict[str, np.ndarray]
    modality_names: Tuple[str, ...]
    scores: Optional[np.ndarray] = None  # regression targets in [-3, 3]

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    def modality_index(self, name: str) -> int:
        try:
            return self.modality_names.index(name)
        except ValueError:
            raise ContractError(
                f"unknown modality {name!r}; have {self.modality_names}"
            ) from None

    def present_col(self, name: str) -> np.ndarray:
        return self.present_mask[:, self.modality_index(name)]

    def take(self, rows: np.ndarray) -> "MultimodalBatch":
        return MultimodalBatch(
            features={m: f[rows] for m, f in self.features.items()},
            labels=self.labels[rows],
            present_mask=self.present_mask[rows],
            feature_mask={m: f[rows] for m, f in self.feature_mask.items()},
            modality_names=self.modality_names,
            scores=None if self.scores is None else self.scores[rows],
        )

    def copy(self) -> "MultimodalBatch":
        return MultimodalBatch(
            features={m: f.copy() for m, f in self.features.items()},
            labels=self.labels.copy(),
            present_mask=self.present_mask.copy(),
            feature_mask={m: f.copy() for m, f in self.feature_mask.items()},
            modality_names=self.modality_names,
            scores=None if self.scores is None else self.scores.copy(),
        )


@dataclass
class BayesOracleReport:
    bayes_accuracy_full: float
    bayes_accuracy_per_subset: Dict[str, float] = field(default_factory=dict)


def subset_key(names: Iterable[str]) -> str:
    return "+".join(sorted(names))


def class_means(spec: GeneratorSpec, modality: str) -> np.ndarray:
    """Unit-norm, pairwise-equidistant class mean vectors (K, d).

    K simplex corners are built in K-1 dimensions and rotated into the
    modality's feature space by a seeded orthogonal map, so every seed of
    the same spec shape shares identical class geometry.
    """
    mod = spec.modality(modality)
    k = spec.num_classes
    centered = np.eye(k) - np.full((k, k), 1.0 / k)
    # Rows of `centered` span a (k-1)-dim subspace; express them there.
    _, _, vt = np.linalg.svd(centered)
    corners = centered @ vt[: k - 1].T  # (k, k-1)
    corners /= np.linalg.norm(corners, axis=1, keepdims=True)
    rng = rng_for(spec.seed, f"class-means/{modality}")
    gauss = rng.normal(size=(mod.dim, mod.dim))
    q, r = np.linalg.qr(gauss)
    q *= np.sign(np.diag(r))  # fix the QR sign ambiguity deterministically
    return corners @ q[:, : k - 1].T  # (k, d)


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    counts = [n // k + (1 if c < n % k else 0) for c in range(k)]
    labels = np.repeat(np.arange(k), counts)
    rng.shuffle(labels)
    return labels


def generate(
    spec: GeneratorSpec, n: int, regression: bool = False, partition: str = ""
) -> MultimodalBatch:
    """Draw n labeled samples; labels balanced up to remainder, full masks.

    ``partition`` salts the noise streams so e.g. a train and an eval
    split of the same spec share class geometry but draw disjoint noise.
    """
    if n < spec.num_classes:
        raise ContractError(
            f"need at least num_classes={spec.num_classes} samples, got {n}"
        )
    labels = _balanced_labels(
        n, spec.num_classes, rng_for(spec.seed, f"labels/{partition}/{n}")
    )
    features = {}
    feature_mask = {}
    for mod in spec.modalities:
        mu = class_means(spec, mod.name)
        noise = rng_for(spec.seed, f"noise/{partition}/{mod.name}/{n}").normal(
            0.0, mod.noise_scale, size=(n, mod.dim)
        )
        features[mod.name] = mod.snr * mu[labels] + noise
        feature_mask[mod.name] = np.ones((n, mod.dim), dtype=bool)
    scores = None
    if regression:
        anchor = np.linspace(-3.0, 3.0, spec.num_classes)
        jitter = rng_for(spec.seed, f"scores/{partition}/{n}").normal(0.0, 0.1, size=n)
        scores = anchor[labels] + jitter
    return MultimodalBatch(
        features=features,
        labels=labels,
        present_mask=np.ones((n, len(spec.modalities)), dtype=bool),
        feature_mask=feature_mask,
        modality_names=spec.modality_names,
        scores=scores,
    )


def apply_modality_missing(
    batch: MultimodalBatch, keep: Sequence[str]
) -> MultimodalBatch:
    """Zero out every modality not in ``keep`` and mark it absent."""
    if not keep:
        raise ContractError("the kept modality subset must be non-empty")
    keep_set = set(keep)
    for name in keep_set:
        batch.modality_index(name)  # validates
    out = batch.copy()
    for idx, name in enumerate(out.modality_names):
        if name not in keep_set:
            out.features[name][:] = 0.0
            out.present_mask[:, idx] = False
            out.feature_mask[name][:] = False
    return out


def apply_feature_dropout(
    batch: MultimodalBatch, rate: float, seed: int
) -> MultimodalBatch:
    """Independently zero each feature entry with probability ``rate``."""
    if not (0.0 <= rate <= 0.9):
        raise ContractError(f"dropout rate must lie in [0, 0.9], got {rate}")
    out = batch.copy()
    for name in out.modality_names:
        rng = rng_for(seed, f"feature-dropout/{name}")
        drop = rng.random(out.features[name].shape) < rate
        out.features[name][drop] = 0.0
        out.feature_mask[name] &= ~drop
    return out


# ---------------------------------------------------------------------------
# exact Bayes oracle
# ---------------------------------------------------------------------------

def _log_posterior(
    spec: GeneratorSpec, batch: MultimodalBatch, subset: Sequence[str]
) -> np.ndarray:
    """Unnormalized log posterior (n, K) using only present modalities in subset."""
    for name in subset:
        spec.modality(name)
    n = batch.n
    lp = np.zeros((n, spec.num_classes))
    for name in subset:
        mod = spec.modality(name)
        scaled_means = class_means(spec, name) * mod.snr  # (K, d)
        x = batch.features[name]
        present = batch.present_col(name)
        # -||x - snr*mu_y||^2 / (2 sigma^2); class prior is uniform.
        d2 = ((x[:, None, :] - scaled_means[None, :, :]) ** 2).sum(axis=2)
        lp -= np.where(present[:, None], d2 / (2.0 * mod.noise_scale**2), 0.0)
    return lp


def bayes_predict(
    spec: GeneratorSpec, batch: MultimodalBatch, subset: Sequence[str]
) -> np.ndarray:
    """Argmax of the exact class posterior over the given modality subset."""
    if not subset:
        raise ContractError("oracle subset must be non-empty")
    return np.argmax(_log_posterior(spec, batch, subset), axis=1)


def bayes_oracle(
    spec: GeneratorSpec, batch: MultimodalBatch, subset: Optional[Sequence[str]] = None
) -> BayesOracleReport:
    """Accuracy of the exact-posterior classifier on this batch.

    With ``subset=None`` the report also enumerates every non-empty
    modality subset.
    """
    names = spec.modality_names
    full_acc = float(np.mean(bayes_predict(spec, batch, names) == batch.labels))
    per_subset: Dict[str, float] = {}
    if subset is None:
        for r in range(1, len(names) + 1):
            for combo in combinations(names, r):
                pred = bayes_predict(spec, batch, combo)
                per_subset[subset_key(combo)] = float(np.mean(pred == batch.labels))
    else:
        pred = bayes_predict(spec, batch, subset)
        per_subset[subset_key(subset)] = float(np.mean(pred == batch.labels))
    return BayesOracleReport(
        bayes_accuracy_full=full_acc, bayes_accuracy_per_subset=per_subset
    )


# ---------------------------------------------------------------------------
# CSV export / import
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header_comment: Optional[str], columns, rows) -> None:
    with path.open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _read_csv(path: Path):
    with path.open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    rows = list(reader)
    return rows[0], rows[1:]


def save_batch_dir(
    batch: MultimodalBatch, out_dir, header_comment: Optional[str] = None
) -> None:
    """Write one features CSV per modality plus labels.csv and masks.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in batch.modality_names:
        feats = batch.features[name]
        cols = [f"f{i}" for i in range(feats.shape[1])]
        _write_csv(
            out / f"features_{name}.csv",
            header_comment,
            cols,
            ([repr(float(v)) for v in row] for row in feats),
        )
        _write_csv(
            out / f"feature_mask_{name}.csv",
            header_comment,
            cols,
            ([str(int(v)) for v in row] for row in batch.feature_mask[name]),
        )
    label_cols = ["label"] if batch.scores is None else ["label", "score"]
    label_rows = (
        [[str(int(y))] for y in batch.labels]
        if batch.scores is None
        else [[str(int(y)), repr(float(s))] for y, s in zip(batch.labels, batch.scores)]
    )
    _write_csv(out / "labels.csv", header_comment, label_cols, label_rows)
    _write_csv(
        out / "masks.csv",
        header_comment,
        list(batch.modality_names),
        ([str(int(v)) for v in row] for row in batch.present_mask),
    )


def load_batch_dir(data_dir) -> MultimodalBatch:
    data = Path(data_dir)
    mask_cols, mask_rows = _read_csv(data / "masks.csv")
    modality_names = tuple(mask_cols)
    present = np.array([[cell == "1" for cell in row] for row in mask_rows], dtype=bool)
    label_cols, label_rows = _read_csv(data / "labels.csv")
    labels = np.array([int(row[0]) for row in label_rows])
    scores = None
    if "score" in label_cols:
        scores = np.array([float(row[1]) for row in label_rows])
    features = {}
    feature_mask = {}
    for name in modality_names:
        _, rows = _read_csv(data / f"features_{name}.csv")
        features[name] = np.array([[float(c) for c in row] for row in rows])
        mask_path = data / f"feature_mask_{name}.csv"
        if mask_path.exists():
            _, mrows = _read_csv(mask_path)
            feature_mask[name] = np.array(
                [[c == "1" for c in row] for row in mrows], dtype=bool
            )
        else:
            feature_mask[name] = np.ones_like(features[name], dtype=bool)
    return MultimodalBatch(
        features=features,
        labels=labels,
        present_mask=present,
        feature_mask=feature_mask,
        modality_names=modality_names,
        scores=scores,
    )


def spec_to_json(spec: GeneratorSpec) -> dict:
    return {
        "num_classes": spec.num_classes,
        "samples_per_class": spec.samples_per_class,
        "seed": spec.seed,
        "modalities": [
            {"name": m.name, "dim": m.dim, "snr": m.snr, "noise_scale": m.noise_scale}
            for m in spec.modalities
        ],
    }


def spec_from_json(payload: dict) -> GeneratorSpec:
    return GeneratorSpec(
        num_classes=payload["num_classes"],
        modalities=tuple(
            ModalityConfig(m["name"], m["dim"], m["snr"], m["noise_scale"])
            for m in payload["modalities"]
        ),
        samples_per_class=payload.get("samples_per_class", 64),
        seed=payload.get("seed", 0),
    )


def save_spec(spec: GeneratorSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_json(spec), indent=2))


def load_spec(path) -> GeneratorSpec:
    return spec_from_json(json.loads(Path(path).read_text()))
