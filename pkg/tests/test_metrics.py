import numpy as np
import pytest

from vcekit import metrics as MX
from vcekit import models as M
from vcekit.data import synth_shapes
from vcekit.guidance import CounterfactualRecord

RES = 16


# ---------------------------------------------------------------------------
# stubs and oracles
# ---------------------------------------------------------------------------


class PixelClassifier:
    """Predicts the integer stored at a chosen pixel; lets tests pin labels."""

    def __init__(self, position=(0, 0, 0)):
        self.position = position

    def predict(self, images, batch: int = 256):
        c, i, j = self.position
        return np.asarray(images)[:, c, i, j].round().astype(np.int64)


def coded_image(label: int, extra: int = 0) -> np.ndarray:
    img = np.zeros((1, RES, RES), dtype=np.float32)
    img[0, 0, 0] = float(label)
    img[0, 0, 1] = float(extra)
    return img


def make_record(pred: int, y: int, y_t: int, oracle_pred: int | None = None,
                failed: bool = False, rejected: bool = False) -> CounterfactualRecord:
    return CounterfactualRecord(
        original=coded_image(y), source_label=y, target_label=y_t,
        generated=coded_image(pred, extra=pred if oracle_pred is None else oracle_pred),
        predicted_label=pred, subject_log_probs=np.zeros(6, dtype=np.float32),
        config={}, seed=0, wall_time=0.0, failed=failed, rejected=rejected)


def brute_force_rates(preds, y, y_t):
    """Independent recount with a plain loop: (TA, OA, other)."""
    n_t = n_o = 0
    for p in preds:
        if p == y_t:
            n_t += 1
        elif p == y:
            n_o += 1
    n = len(preds)
    return n_t / n, n_o / n, (n - n_t - n_o) / n


SUBJECT = PixelClassifier((0, 0, 0))
SECOND = PixelClassifier((0, 0, 1))


# ---------------------------------------------------------------------------
# validity rates
# ---------------------------------------------------------------------------


def test_target_and_original_accuracy_hand_cases():
    y, y_t = 0, 1
    recs = [make_record(1, y, y_t), make_record(1, y, y_t), make_record(0, y, y_t)]
    assert MX.target_accuracy(recs, SUBJECT) == pytest.approx(2 / 3)
    assert MX.original_accuracy(recs, SUBJECT) == pytest.approx(1 / 3)
    all_hit = [make_record(1, y, y_t) for _ in range(4)]
    assert MX.target_accuracy(all_hit, SUBJECT) == 1.0
    three_way = [make_record(0, y, y_t), make_record(1, y, y_t), make_record(5, y, y_t)]
    assert MX.target_accuracy(three_way, SUBJECT) == pytest.approx(1 / 3)
    assert MX.original_accuracy(three_way, SUBJECT) == pytest.approx(1 / 3)


def test_rates_match_brute_force_on_randomized_tables():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(1, 60))
        y, y_t = 0, 1
        preds = rng.integers(0, 6, size=n)
        recs = [make_record(int(p), y, y_t) for p in preds]
        ta = MX.target_accuracy(recs, SUBJECT)
        oa = MX.original_accuracy(recs, SUBJECT)
        other = MX.other_rate(recs, SUBJECT)
        bta, boa, bother = brute_force_rates(list(preds), y, y_t)
        assert ta == bta
        assert oa == boa
        assert round(ta * n) + round(oa * n) + round(bother * n) == n
        assert ta + oa + other == 1.0


def test_failed_records_are_excluded_from_rates():
    y, y_t = 2, 3
    recs = [make_record(3, y, y_t), make_record(3, y, y_t, failed=True),
            make_record(2, y, y_t)]
    assert MX.target_accuracy(recs, SUBJECT) == 0.5


def test_empty_group_raises():
    with pytest.raises(MX.MetricError, match="no records"):
        MX.target_accuracy([], SUBJECT)
    with pytest.raises(MX.MetricError, match="no records"):
        MX.target_accuracy([make_record(0, 0, 1, failed=True)], SUBJECT)


def test_oracle_score_identity_and_agreement():
    recs = [make_record(0, 4, 5, oracle_pred=0), make_record(1, 4, 5, oracle_pred=2)]
    with pytest.raises(MX.MetricError, match="subject"):
        MX.oracle_score(recs, SUBJECT, SUBJECT)
    assert MX.oracle_score(recs, SUBJECT, SECOND) == 0.5
    # a distinct object with identical behaviour is a legal oracle
    clone = PixelClassifier((0, 0, 0))
    assert MX.oracle_score(recs, SUBJECT, clone) == 1.0


def test_oracle_target_accuracy_and_committee():
    y, y_t = 0, 1
    recs = [make_record(1, y, y_t, oracle_pred=p) for p in (1, 1, 0, 5)]
    assert MX.oracle_target_accuracy(recs, SECOND) == 0.5
    five = [make_record(1, y, y_t, oracle_pred=p) for p in (1, 1, 0, 0, 0)]
    committee = {"a": SECOND, "b": PixelClassifier((0, 0, 0))}
    # per-oracle OTAs are 2/5 (pixel 1) and 1.0 (pixel 0 reads back preds)
    got = MX.committee_oracle_target_accuracy(five, committee)
    assert got == pytest.approx((0.4 + 1.0) / 2)
    with pytest.raises(MX.MetricError, match="committee"):
        MX.committee_oracle_target_accuracy(five, {})


# ---------------------------------------------------------------------------
# minkowski
# ---------------------------------------------------------------------------


def test_minkowski_hand_values():
    assert MX.minkowski(np.zeros(2), np.array([3.0, 4.0]), 2.0) == pytest.approx(5.0)
    assert MX.minkowski(np.zeros(2), np.ones(2), 1.0) == pytest.approx(2.0)
    assert MX.minkowski(np.zeros(2), np.ones(2), 1.5) == pytest.approx(2 ** (2 / 3))
    x = np.random.default_rng(0).standard_normal((1, 4, 4))
    assert MX.minkowski(x, x, 2.0) == 0.0


def test_minkowski_validation():
    with pytest.raises(MX.MetricError, match="shape"):
        MX.minkowski(np.zeros(2), np.zeros(3), 2.0)
    with pytest.raises(MX.MetricError, match="order"):
        MX.minkowski(np.zeros(2), np.zeros(2), 3.0)


# ---------------------------------------------------------------------------
# perceptual distance
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def featurenet():
    return M.Classifier.init(M.ClassifierArch(channels=(4, 8, 8), embed_dim=16), 9,
                             "featurenet")


@pytest.fixture(scope="module")
def trained_featurenet():
    ds = synth_shapes(5, per_class=30)
    return M.train_classifier(ds, "featurenet", M.TrainParams(epochs=6, batch_size=32),
                              seed=9)


def test_lpips_zero_on_identical(featurenet):
    x = np.random.default_rng(1).standard_normal((3, 1, RES, RES)).astype(np.float32)
    np.testing.assert_array_equal(MX.lpips_batch(x, x, featurenet), np.zeros(3))


def test_lpips_symmetric_exactly(featurenet):
    rng = np.random.default_rng(2)
    a = rng.standard_normal((4, 1, RES, RES)).astype(np.float32)
    b = rng.standard_normal((4, 1, RES, RES)).astype(np.float32)
    ab = MX.lpips_batch(a, b, featurenet)
    ba = MX.lpips_batch(b, a, featurenet)
    assert ab.tobytes() == ba.tobytes()
    assert (ab > 0).all()


def test_lpips_monotone_in_perturbation_size(featurenet):
    rng = np.random.default_rng(3)
    base = np.tile(rng.standard_normal((1, 1, RES, RES)).astype(np.float32), (100, 1, 1, 1))
    noise = rng.standard_normal(base.shape).astype(np.float32)
    small = MX.lpips_batch(base, base + 0.05 * noise, featurenet).mean()
    big = MX.lpips_batch(base, base + 0.3 * noise, featurenet).mean()
    assert big > small


def test_lpips_validation(featurenet):
    x = np.zeros((2, 1, RES, RES), dtype=np.float32)
    with pytest.raises(MX.MetricError, match="shape"):
        MX.lpips_batch(x, x[:1], featurenet)
    with pytest.raises(MX.MetricError, match="weight"):
        MX.lpips_batch(x, x, featurenet, weights=[1.0])
    with pytest.raises(MX.MetricError, match="no layer"):
        MX.lpips_batch(x, x, featurenet, layers=("conv9",))
    with pytest.raises(MX.MetricError, match="spatial"):
        MX.lpips_batch(x, x, featurenet, layers=("embed",))


def test_lpips_scalar_wrapper(featurenet):
    rng = np.random.default_rng(4)
    a = rng.standard_normal((1, RES, RES)).astype(np.float32)
    b = rng.standard_normal((1, RES, RES)).astype(np.float32)
    assert MX.lpips(a, b, featurenet) == MX.lpips_batch(a[None], b[None], featurenet)[0]


# ---------------------------------------------------------------------------
# frechet distance
# ---------------------------------------------------------------------------


def random_spd(dim, seed):
    a = np.random.default_rng(seed).standard_normal((dim, dim))
    return a @ a.T + 0.1 * np.eye(dim)


def test_frechet_identical_is_zero():
    cov = random_spd(5, 0)
    mu = np.arange(5.0)
    assert MX.frechet_gaussian(mu, cov, mu, cov) <= 1e-6


def test_frechet_one_dim_closed_forms():
    assert MX.frechet_gaussian([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0, abs=1e-6)
    assert MX.frechet_gaussian([0.0], [[4.0]], [0.0], [[1.0]]) == pytest.approx(1.0, abs=1e-6)


def test_frechet_symmetric():
    mu1, cov1 = np.zeros(4), random_spd(4, 1)
    mu2, cov2 = np.ones(4), random_spd(4, 2)
    d12 = MX.frechet_gaussian(mu1, cov1, mu2, cov2)
    d21 = MX.frechet_gaussian(mu2, cov2, mu1, cov1)
    assert abs(d12 - d21) <= 1e-6
    assert d12 > 0


def test_frechet_rejects_indefinite_matrices():
    bad = np.diag([1.0, -0.01])
    with pytest.raises(MX.MetricError, match="PSD"):
        MX.frechet_gaussian(np.zeros(2), bad, np.zeros(2), np.eye(2))


def test_frechet_tolerates_tiny_negative_eigenvalues():
    v = np.array([[1.0, 2.0, 3.0]])
    rank1 = v.T @ v  # eigenvalues {14, 0, 0} with rounding jitter
    assert MX.frechet_gaussian(np.zeros(3), rank1, np.zeros(3), rank1) <= 1e-6


def test_frechet_shape_validation():
    with pytest.raises(MX.MetricError, match="mismatch"):
        MX.frechet_gaussian(np.zeros(2), np.eye(2), np.zeros(3), np.eye(3))
    with pytest.raises(MX.MetricError, match="covariance"):
        MX.frechet_gaussian(np.zeros(2), np.eye(3), np.zeros(2), np.eye(3))


# ---------------------------------------------------------------------------
# fid
# ---------------------------------------------------------------------------


def test_fid_self_is_tiny(featurenet):
    imgs = np.random.default_rng(5).standard_normal((10, 1, RES, RES)).astype(np.float32)
    assert MX.fid(imgs, imgs, featurenet, features="conv1_gap") <= 1e-5


def test_fid_embedding_path(featurenet):
    rng = np.random.default_rng(6)
    a = rng.standard_normal((20, 1, RES, RES)).astype(np.float32)
    b = rng.standard_normal((20, 1, RES, RES)).astype(np.float32)
    assert MX.fid(a, b, featurenet, features="embed") > 0  # dim 16, sets of 20


def test_fid_exactly_permutation_invariant(featurenet):
    rng = np.random.default_rng(7)
    a = rng.standard_normal((8, 1, RES, RES)).astype(np.float32)
    b = rng.standard_normal((9, 1, RES, RES)).astype(np.float32)
    perm = rng.permutation(8)
    d1 = MX.fid(a, b, featurenet, features="conv1_gap")
    d2 = MX.fid(a[perm], b, featurenet, features="conv1_gap")
    assert d1 == d2


def test_fid_set_size_contract(featurenet):
    imgs = np.zeros((4, 1, RES, RES), dtype=np.float32)  # conv1_gap dim 4 needs >= 5
    with pytest.raises(MX.MetricError, match="at least 5"):
        MX.fid(imgs, imgs, featurenet, features="conv1_gap")
    with pytest.raises(MX.MetricError, match="unknown feature"):
        MX.fid(imgs, imgs, featurenet, features="conv7_gap")


def test_fid_separates_classes(trained_featurenet):
    ds = synth_shapes(8, per_class=60)
    filled = ds.images[ds.labels == 0]
    disc = ds.images[ds.labels == 2]
    same = MX.fid(filled[:30], filled[30:], trained_featurenet, features="conv1_gap")
    cross = MX.fid(filled[:30], disc[:30], trained_featurenet, features="conv1_gap")
    assert same < cross


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------


def test_diversity_contracts(featurenet):
    rng = np.random.default_rng(8)
    a = rng.standard_normal((1, RES, RES)).astype(np.float32)
    b = rng.standard_normal((1, RES, RES)).astype(np.float32)
    same = np.stack([a, a, a])
    assert MX.diversity([same], featurenet) == 0.0
    pair = np.stack([a, b])
    assert MX.diversity([pair], featurenet) == MX.lpips(a, b, featurenet)
    assert MX.diversity([pair, pair, pair], featurenet) == pytest.approx(
        MX.diversity([pair], featurenet), rel=1e-12)
    with pytest.raises(MX.MetricError, match="set 1 has 1"):
        MX.diversity([pair, np.stack([a])], featurenet)
    with pytest.raises(MX.MetricError, match="no image sets"):
        MX.diversity([], featurenet)


# ---------------------------------------------------------------------------
# group evaluation
# ---------------------------------------------------------------------------


def test_evaluate_group_end_to_end(featurenet):
    y, y_t = 0, 1
    preds = [1, 1, 1, 0, 5, 1, 1, 0]
    recs = [make_record(p, y, y_t) for p in preds]
    recs.append(make_record(1, y, y_t, failed=True))
    real = np.random.default_rng(9).standard_normal((8, 1, RES, RES)).astype(np.float32)
    report = MX.evaluate_group(
        recs, source_class=y, target_class=y_t, subject=SUBJECT, subject_name="subject",
        oracles={"alt": SECOND}, featurenet=featurenet, real_reference=real,
        flags={"cone": True}, fid_features="conv1_gap")
    assert report.sample_count == 8
    assert report.failed == 1
    assert report.values["TA"] == pytest.approx(5 / 8)
    assert report.values["OA"] == pytest.approx(2 / 8)
    assert report.values["TA"] + report.values["OA"] + report.values["other"] == 1.0
    assert report.values["failed_rate"] == pytest.approx(1 / 9)
    assert report.values["OTA_committee"] == MX.oracle_target_accuracy(recs, SECOND)
    assert report.values["FID"] >= 0
    assert report.values["LPIPS"] > 0
    assert report.values["D2"] > 0
    assert report.flags == {"cone": True}
    assert report.os_by_oracle["alt"] == MX.oracle_score(recs, SUBJECT, SECOND)


def test_evaluate_group_rejects_subject_in_committee(featurenet):
    recs = [make_record(1, 0, 1)]
    with pytest.raises(MX.MetricError, match="committee must exclude"):
        MX.evaluate_group(recs, source_class=0, target_class=1, subject=SUBJECT,
                          subject_name="s", oracles={"self": SUBJECT},
                          featurenet=featurenet,
                          real_reference=np.zeros((8, 1, RES, RES), dtype=np.float32))


def test_report_rate_validation():
    with pytest.raises(MX.MetricError, match="outside"):
        MX.MetricReport(source_class=0, target_class=1, subject_name="s", flags={},
                        values={"TA": 1.7}, sample_count=1, failed=0, rejected=0)


def test_rejected_records_shrink_closeness_set(featurenet):
    y, y_t = 0, 1
    recs = [make_record(1, y, y_t) for _ in range(6)]
    recs.append(make_record(0, y, y_t, rejected=True))
    real = np.random.default_rng(10).standard_normal((8, 1, RES, RES)).astype(np.float32)
    report = MX.evaluate_group(
        recs, source_class=y, target_class=y_t, subject=SUBJECT, subject_name="s",
        oracles={"alt": SECOND}, featurenet=featurenet, real_reference=real,
        fid_features="conv1_gap")
    # validity still counts all seven records; closeness only the accepted six
    assert report.values["TA"] == pytest.approx(6 / 7)
    assert report.rejected == 1
    assert report.sample_count == 7
    assert report.values["rejected_rate"] == pytest.approx(1 / 7)
