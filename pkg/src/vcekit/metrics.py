"""Validity, closeness, realism, and diversity metrics for generation groups.

Validity rates (TA/OA/OS/OTA) are agreement counts over a group's records.
Closeness is pixel-space Minkowski distance plus a perceptual distance in
the normalized activation space of a frozen feature network.  Realism is
the Frechet distance between Gaussian fits of feature embeddings, and
diversity is mean pairwise perceptual distance.  Everything here is pure:
fixed-order float64 reductions, no RNG, no model mutation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LPIPS_LAYERS = ("conv1", "conv2", "conv3")
FID_FEATURES = ("embed", "conv1_gap", "conv2_gap", "conv3_gap")
MINKOWSKI_ORDERS = (1.0, 1.5, 2.0)


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# record filtering
# ---------------------------------------------------------------------------


def usable_records(records):
    """Records that completed generation (failures excluded)."""
    return [r for r in records if not r.failed]


def accepted_records(records):
    """Records that count toward closeness/realism (failed and rejected out)."""
    return [r for r in records if not (r.failed or r.rejected)]


def _generated_stack(records) -> np.ndarray:
    return np.stack([r.generated for r in records])


def _require(records, what: str):
    if not records:
        raise MetricError(f"no records to score for {what}")
    return records


# ---------------------------------------------------------------------------
# validity
# ---------------------------------------------------------------------------


def target_accuracy(records, subject) -> float:
    recs = _require(usable_records(records), "target accuracy")
    preds = subject.predict(_generated_stack(recs))
    hits = sum(int(p == r.target_label) for p, r in zip(preds, recs))
    return hits / len(recs)


def original_accuracy(records, subject) -> float:
    recs = _require(usable_records(records), "original accuracy")
    preds = subject.predict(_generated_stack(recs))
    hits = sum(int(p == r.source_label) for p, r in zip(preds, recs))
    return hits / len(recs)


def other_rate(records, subject) -> float:
    """Residual mass: exactly 1 - TA - OA, so the three always sum to one."""
    return 1.0 - (target_accuracy(records, subject) + original_accuracy(records, subject))


def oracle_score(records, subject, oracle) -> float:
    """Agreement rate between subject and an independent oracle."""
    if oracle is subject:
        raise MetricError("oracle must not be the subject under evaluation")
    recs = _require(usable_records(records), "oracle score")
    gen = _generated_stack(recs)
    agree = subject.predict(gen) == oracle.predict(gen)
    return int(agree.sum()) / len(recs)


def oracle_target_accuracy(records, oracle) -> float:
    recs = _require(usable_records(records), "oracle target accuracy")
    preds = oracle.predict(_generated_stack(recs))
    hits = sum(int(p == r.target_label) for p, r in zip(preds, recs))
    return hits / len(recs)


def committee_oracle_target_accuracy(records, oracles: dict) -> float:
    """Mean single-oracle OTA over a (non-empty) committee."""
    if not oracles:
        raise MetricError("empty oracle committee")
    values = [oracle_target_accuracy(records, m) for m in oracles.values()]
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# closeness
# ---------------------------------------------------------------------------


def minkowski(x: np.ndarray, x_hat: np.ndarray, p: float) -> float:
    if not any(abs(p - q) < 1e-12 for q in MINKOWSKI_ORDERS):
        raise MetricError(f"order p must be one of {MINKOWSKI_ORDERS}, got {p}")
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    diff = np.abs(x.reshape(-1) - x_hat.reshape(-1))
    return float(np.sum(diff ** p) ** (1.0 / p))


def _normalized_features(images: np.ndarray, featurenet, layers) -> dict:
    feats = featurenet.feature_maps(np.asarray(images, dtype=np.float32))
    out = {}
    for layer in layers:
        if layer not in feats:
            raise MetricError(f"feature network has no layer {layer!r}")
        a = feats[layer].astype(np.float64)
        if a.ndim != 4:
            raise MetricError(f"layer {layer!r} is not spatial; lpips needs (N, C, H, W)")
        norm = np.sqrt(np.sum(np.square(a), axis=1, keepdims=True) + 1e-10)
        out[layer] = a / norm
    return out


def lpips_batch(a: np.ndarray, b: np.ndarray, featurenet,
                layers=LPIPS_LAYERS, weights=None) -> np.ndarray:
    """Perceptual distances between paired image stacks, one per pair.

    Per layer: channel-unit-normalize each spatial position, take squared
    differences summed over channels, average over positions; layers combine
    with the given weights (default 1 each).
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if weights is None:
        weights = [1.0] * len(layers)
    if len(weights) != len(layers):
        raise MetricError("one weight per layer required")
    fa = _normalized_features(a, featurenet, layers)
    fb = _normalized_features(b, featurenet, layers)
    total = np.zeros(a.shape[0], dtype=np.float64)
    for layer, w in zip(layers, weights):
        sq = np.sum(np.square(fa[layer] - fb[layer]), axis=1)  # (N, H, W)
        total += float(w) * sq.mean(axis=(1, 2))
    return total


def lpips(x: np.ndarray, x_hat: np.ndarray, featurenet,
          layers=LPIPS_LAYERS, weights=None) -> float:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
        x_hat = np.asarray(x_hat)[None]
    return float(lpips_batch(x, x_hat, featurenet, layers, weights)[0])


# ---------------------------------------------------------------------------
# realism
# ---------------------------------------------------------------------------


def _psd_sqrt(mat: np.ndarray, label: str) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -1e-6:
        raise MetricError(f"{label} is not PSD: eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(mu1, cov1, mu2, cov2) -> float:
    """Closed-form Frechet distance between two Gaussians.

    ||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1^{1/2} C2 C1^{1/2})^{1/2}), with all
    matrix square roots taken by symmetric eigendecomposition.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise MetricError("moment shape mismatch between the two Gaussians")
    if cov1.shape != (mu1.size, mu1.size):
        raise MetricError(f"covariance shape {cov1.shape} does not match mean {mu1.shape}")
    root1 = _psd_sqrt(cov1, "cov1")
    _psd_sqrt(cov2, "cov2")  # validates PSD of the second input
    inner = _psd_sqrt(root1 @ ((cov2 + cov2.T) / 2.0) @ root1, "cov1^1/2 cov2 cov1^1/2")
    d2 = float(np.sum((mu1 - mu2) ** 2) + np.trace((cov1 + cov1.T) / 2.0)
               + np.trace((cov2 + cov2.T) / 2.0) - 2.0 * np.trace(inner))
    return max(d2, 0.0)


def embed_images(images: np.ndarray, featurenet, features: str = "embed") -> np.ndarray:
    """Feature embeddings used for distribution metrics.

    ``embed`` is the penultimate linear layer; ``conv{k}_gap`` is the spatial
    mean of a conv activation (a cheaper, lower-dimensional alternative for
    small sets).
    """
    if features not in FID_FEATURES:
        raise MetricError(f"unknown feature choice {features!r}; options: {FID_FEATURES}")
    maps = featurenet.feature_maps(np.asarray(images, dtype=np.float32))
    if features == "embed":
        return maps["embed"].astype(np.float64)
    layer = features.split("_")[0]
    return maps[layer].astype(np.float64).mean(axis=(2, 3))


def _gaussian_fit(embeddings: np.ndarray):
    # canonical row order makes the reduction independent of input order
    order = np.lexsort(embeddings.T)
    emb = embeddings[order]
    mu = emb.mean(axis=0)
    cov = np.cov(emb, rowvar=False, ddof=1)
    return mu, np.atleast_2d(cov)


def fid(set_a: np.ndarray, set_b: np.ndarray, featurenet, features: str = "embed") -> float:
    """Frechet distance between Gaussian fits of two image sets' embeddings."""
    emb_a = embed_images(set_a, featurenet, features)
    emb_b = embed_images(set_b, featurenet, features)
    dim = emb_a.shape[1]
    smallest = min(emb_a.shape[0], emb_b.shape[0])
    if smallest < dim + 1:
        raise MetricError(
            f"each set needs at least {dim + 1} images for a {dim}-dim unbiased "
            f"covariance, got {emb_a.shape[0]} and {emb_b.shape[0]}")
    mu_a, cov_a = _gaussian_fit(emb_a)
    mu_b, cov_b = _gaussian_fit(emb_b)
    return frechet_gaussian(mu_a, cov_a, mu_b, cov_b)


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------


def diversity(sets, featurenet) -> float:
    """Mean over originals of mean pairwise perceptual distance in each set."""
    if not sets:
        raise MetricError("no image sets given")
    per_set = []
    for k, images in enumerate(sets):
        images = np.asarray(images)
        n = images.shape[0]
        if n < 2:
            raise MetricError(f"set {k} has {n} image(s); pairwise distance needs >= 2")
        ia, ib = np.triu_indices(n, k=1)
        dists = lpips_batch(images[ia], images[ib], featurenet)
        per_set.append(float(dists.mean()))
    return float(np.mean(per_set))


# ---------------------------------------------------------------------------
# group evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    """All metrics for one (source, target, subject, flags) generation group."""

    source_class: int
    target_class: int
    subject_name: str
    flags: dict
    values: dict
    sample_count: int
    failed: int
    rejected: int
    os_by_oracle: dict = field(default_factory=dict)
    ota_by_oracle: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in ("TA", "OA", "other", "OTA_committee", "failed_rate", "rejected_rate"):
            if key in self.values and not -1e-9 <= self.values[key] <= 1 + 1e-9:
                raise MetricError(f"rate {key}={self.values[key]} outside [0, 1]")


def evaluate_group(records, *, source_class: int, target_class: int, subject,
                   subject_name: str, oracles: dict, featurenet,
                   flags: dict | None = None,
                   fid_features: str | None = "embed") -> MetricReport:
    """Score one group of records against every metric family.

    ``oracles`` maps names to committee models (the subject must not be one
    of them).  Realism is the Frechet distance between the embedding
    distributions of the group's originals and their generated counterparts.
    ``fid_features=None`` skips the FID (callers do this when a group is too
    small for a covariance fit).
    """
    records = list(records)
    if not records:
        raise MetricError("empty record group")
    usable = usable_records(records)
    accepted = accepted_records(records)
    n_failed = len(records) - len(usable)
    n_rejected = len(usable) - len(accepted)
    for name, model in oracles.items():
        if model is subject:
            raise MetricError(f"oracle {name!r} is the subject; committee must exclude it")

    ta = target_accuracy(records, subject)
    oa = original_accuracy(records, subject)
    values = {
        "TA": ta,
        "OA": oa,
        "other": 1.0 - (ta + oa),
        "failed_rate": n_failed / len(records),
        "rejected_rate": (n_rejected / len(usable)) if usable else 0.0,
    }
    os_map = {name: oracle_score(records, subject, m) for name, m in oracles.items()}
    ota_map = {name: oracle_target_accuracy(records, m) for name, m in oracles.items()}
    values["OTA_committee"] = committee_oracle_target_accuracy(records, oracles)

    scored = accepted if accepted else usable
    originals = np.stack([r.original for r in scored])
    generated = np.stack([r.generated for r in scored])
    for p, key in ((1.0, "D1"), (1.5, "D1.5"), (2.0, "D2")):
        values[key] = float(np.mean([minkowski(o, g, p) for o, g in zip(originals, generated)]))
    values["LPIPS"] = float(lpips_batch(originals, generated, featurenet).mean())
    if fid_features is not None:
        values["FID"] = fid(originals, generated, featurenet, features=fid_features)

    return MetricReport(
        source_class=int(source_class), target_class=int(target_class),
        subject_name=subject_name, flags=dict(flags or {}), values=values,
        sample_count=len(usable), failed=n_failed, rejected=n_rejected,
        os_by_oracle=os_map, ota_by_oracle=ota_map)
