import math

import numpy as np
import pytest

from regionret.errors import EmptyPositiveError, ParameterError
from regionret.losses import (ContrastiveBatch, cotrain_loss,
                              cross_entropy_loss, region_contrastive_loss)
from regionret.numerics import l2_normalize, make_rng, softmax
from regionret.region_head import RegionEmbedding


def make_batch(vectors_by_group, labels_by_group, tau=0.1, **kw):
    """vectors/labels given as [query groups..., anchor groups...] split in half."""
    half = len(vectors_by_group) // 2
    groups = []
    idx = 0
    for vecs, labs in zip(vectors_by_group, labels_by_group):
        group = []
        for v, lab in zip(vecs, labs):
            zn = l2_normalize(np.asarray(v, dtype=np.float64))
            group.append(RegionEmbedding(f"im{idx}", lab, zn.copy(), zn))
            idx += 1
        groups.append(group)
    return ContrastiveBatch(query_groups=groups[:half],
                            anchor_groups=groups[half:], tau=tau, **kw)


def random_batch(rng, groups=2, regions=3, dim=6, classes=3, tau=0.1, **kw):
    vecs, labs = [], []
    for _ in range(2 * groups):
        vecs.append([rng.normal(size=dim) for _ in range(regions)])
        labs.append(list(rng.integers(0, classes, size=regions)))
    return make_batch(vecs, labs, tau=tau, **kw)


def oracle_loss(batch):
    """Independent scalar-loop evaluation of the contrastive objective."""
    embs = batch.flatten()
    n = len(embs)
    nq = sum(len(g) for g in batch.query_groups)
    sides = [0 if i < nq else 1 for i in range(n)]
    slots = []
    for side in (batch.query_groups, batch.anchor_groups):
        for gi, g in enumerate(side):
            slots.extend([gi] * len(g))

    def positives(a):
        out = []
        for b in range(n):
            if b == a or embs[b].label != embs[a].label:
                continue
            if batch.positive_mode == "paired" and not (
                    sides[a] != sides[b] and slots[a] == slots[b]):
                continue
            out.append(b)
        return out

    per_class = {}
    for a in range(n):
        pos = positives(a)
        if not pos:
            continue
        denom = 0.0
        for b in range(n):
            if b == a and not batch.include_self:
                continue
            denom += math.exp(float(embs[a].z_norm @ embs[b].z_norm) / batch.tau)
        term = 0.0
        for p in pos:
            sim = float(embs[a].z_norm @ embs[p].z_norm) / batch.tau
            term += math.log(denom) - sim
        per_class.setdefault(embs[a].label, []).append(term / len(pos))
    if not per_class:
        raise EmptyPositiveError("no positives")
    return sum(sum(v) / len(v) for v in per_class.values()) / len(per_class)


class TestContrastive:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_matches_scalar_oracle(self, seed):
        batch = random_batch(make_rng(seed))
        loss, _ = region_contrastive_loss(batch)
        assert abs(loss - oracle_loss(batch)) < 1e-10

    def test_matches_oracle_paired_mode(self):
        batch = random_batch(make_rng(5), positive_mode="paired")
        loss, _ = region_contrastive_loss(batch)
        assert abs(loss - oracle_loss(batch)) < 1e-10

    def test_matches_oracle_include_self(self):
        batch = random_batch(make_rng(6), include_self=True)
        loss, _ = region_contrastive_loss(batch)
        assert abs(loss - oracle_loss(batch)) < 1e-10

    def test_two_region_trivial_case_is_zero(self):
        rng = make_rng(7)
        batch = make_batch([[rng.normal(size=4)], [rng.normal(size=4)]],
                           [[0], [0]])
        loss, _ = region_contrastive_loss(batch)
        assert abs(loss) < 1e-12

    def test_nonnegative_over_seeds(self):
        for seed in range(20):
            loss, _ = region_contrastive_loss(random_batch(make_rng(seed)))
            assert loss >= -1e-12

    def test_high_temperature_limit(self):
        batch = random_batch(make_rng(8), groups=2, regions=3, tau=1e9)
        loss, _ = region_contrastive_loss(batch)
        n = len(batch.flatten())
        assert abs(loss - math.log(n - 1)) < 1e-6

    def test_high_temperature_limit_include_self(self):
        batch = random_batch(make_rng(9), tau=1e9, include_self=True)
        loss, _ = region_contrastive_loss(batch)
        n = len(batch.flatten())
        assert abs(loss - math.log(n)) < 1e-6

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradients_match_finite_differences(self, seed):
        batch = random_batch(make_rng(seed), groups=1, regions=3, dim=4)
        loss, grads = region_contrastive_loss(batch)
        embs = batch.flatten()
        h = 1e-6
        for idx, e in enumerate(embs):
            numeric = np.zeros_like(e.z_norm)
            for j in range(e.z_norm.size):
                orig = e.z_norm[j]
                e.z_norm[j] = orig + h
                up, _ = region_contrastive_loss(batch)
                e.z_norm[j] = orig - h
                dn, _ = region_contrastive_loss(batch)
                e.z_norm[j] = orig
                numeric[j] = (up - dn) / (2 * h)
            denom = max(np.abs(numeric).max(), np.abs(grads[idx]).max(), 1e-8)
            assert np.abs(grads[idx] - numeric).max() / denom < 1e-5

    def test_no_positive_pair(self):
        rng = make_rng(10)
        batch = make_batch([[rng.normal(size=4)], [rng.normal(size=4)]],
                           [[0], [1]])
        with pytest.raises(EmptyPositiveError):
            region_contrastive_loss(batch)

    def test_bad_temperature(self):
        batch = random_batch(make_rng(0))
        batch.tau = 0.0
        with pytest.raises(ParameterError):
            region_contrastive_loss(batch)

    def test_group_count_mismatch(self):
        batch = random_batch(make_rng(0))
        batch.anchor_groups = batch.anchor_groups[:1]
        with pytest.raises(ParameterError):
            region_contrastive_loss(batch)

    def test_unknown_positive_mode(self):
        batch = random_batch(make_rng(0))
        batch.positive_mode = "mystery"
        with pytest.raises(ParameterError):
            region_contrastive_loss(batch)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, grads = cross_entropy_loss([(np.zeros(4), 1)])
        assert abs(loss - math.log(4)) < 1e-12
        expected = np.full(4, 0.25)
        expected[1] -= 1.0
        assert np.max(np.abs(grads[0] - expected)) < 1e-12

    def test_confident_correct_near_zero(self):
        logits = np.array([50.0, 0.0, 0.0])
        loss, _ = cross_entropy_loss([(logits, 0)])
        assert loss < 1e-12

    def test_mean_over_items(self):
        rng = make_rng(11)
        items = [(rng.normal(size=5), int(rng.integers(0, 5)))
                 for _ in range(4)]
        loss, grads = cross_entropy_loss(items)
        singles = [cross_entropy_loss([it])[0] for it in items]
        assert abs(loss - sum(singles) / 4) < 1e-12
        for (logits, label), g in zip(items, grads):
            expected = softmax(logits)
            expected[label] -= 1.0
            assert np.max(np.abs(g - expected / 4)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = make_rng(12)
        logits = rng.normal(size=6)
        label = 3
        _, grads = cross_entropy_loss([(logits, label)])
        h = 1e-6
        for j in range(6):
            bumped = logits.copy()
            bumped[j] += h
            up, _ = cross_entropy_loss([(bumped, label)])
            bumped[j] -= 2 * h
            dn, _ = cross_entropy_loss([(bumped, label)])
            assert abs(grads[0][j] - (up - dn) / (2 * h)) < 1e-6

    def test_empty(self):
        with pytest.raises(ParameterError):
            cross_entropy_loss([])

    def test_label_out_of_range(self):
        with pytest.raises(ParameterError):
            cross_entropy_loss([(np.zeros(3), 3)])


class TestCotrain:
    def test_weighted_sum(self):
        assert cotrain_loss(2.0, 3.0, lam=0.5) == 3.5

    def test_zero_lambda_drops_ce(self):
        assert cotrain_loss(2.0, 100.0, lam=0.0) == 2.0

    def test_negative_lambda(self):
        with pytest.raises(ParameterError):
            cotrain_loss(1.0, 1.0, lam=-0.1)
