import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crossmost import objectives as obj
from crossmost.config import RunConfig
from crossmost.metrics import (
    EMBEDDING_HEADER,
    MetricRecord,
    PseudoStats,
    SplitTokens,
    accuracy_branches,
    dump_embeddings,
    is_finite_record,
    prediction_bias,
    prediction_entropy,
    pseudolabel_stats,
)
from crossmost.model import CrossModalModel
from crossmost.synthdata import make_dataset

from .conftest import softmax_rows


def test_entropy_closed_forms():
    assert prediction_entropy(np.full((3, 5), 0.2)) == pytest.approx(0.0, abs=1e-12)
    assert prediction_entropy(np.eye(4)) == pytest.approx(math.log(4), abs=1e-12)
    # hand value: 0.5 ln 1.5 + 0.5 ln 0.75
    assert prediction_entropy(np.array([[0.5, 0.25, 0.25]])) == pytest.approx(0.0589, abs=1e-4)


def test_bias_closed_forms():
    assert prediction_bias(np.arange(8), 8) == pytest.approx(0.0, abs=1e-12)
    assert prediction_bias(np.zeros(10, dtype=int), 8) == pytest.approx(math.log(8), abs=1e-12)
    assert prediction_bias(np.array([0, 1, 0, 1]), 4) == pytest.approx(math.log(2), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(2, 8), st.floats(0.1, 10), st.integers(0, 2**32 - 1))
def test_entropy_and_bias_bounds(b, c, scale, seed):
    rng = np.random.default_rng(seed)
    p = softmax_rows(rng, b, c, scale)
    ent = prediction_entropy(p)
    assert -1e-12 <= ent <= math.log(c) + 1e-12
    bias = prediction_bias(rng.integers(0, c, size=b), c)
    assert -1e-12 <= bias <= math.log(c) + 1e-12


def _recount(batches):
    n = acc = acc_img = agree = 0
    for pseudo, q_img, q_pcl in batches:
        for a, s, qi, qp in zip(pseudo.accepted.tolist(), pseudo.source.tolist(), q_img.tolist(), q_pcl.tolist()):
            n += 1
            acc += a
            acc_img += a and s == obj.IMAGE
            agree += qi.index(max(qi)) == qp.index(max(qp))
    return {"source_img_frac": acc_img / acc if acc else 0.0, "agreement": agree / n, "accepted_frac": acc / n}


def test_pseudolabel_stats_match_recount():
    rng = np.random.default_rng(0)
    batches = []
    for _ in range(5):
        qi, qp = torch.from_numpy(softmax_rows(rng, 32, 6)), torch.from_numpy(softmax_rows(rng, 32, 6))
        batches.append((obj.joint_pseudo_labels(qi, qp, 0.6), qi, qp))
    got = pseudolabel_stats(batches)
    want = _recount(batches)
    for k in want:
        assert got[k] == pytest.approx(want[k], abs=1e-12)


def test_pseudolabel_stats_identical_and_disjoint():
    q = torch.tensor([[0.9, 0.1], [0.2, 0.8]], dtype=torch.float64)
    same = pseudolabel_stats([(obj.joint_pseudo_labels(q, q, 0.5), q, q)])
    assert same["agreement"] == 1.0 and same["source_img_frac"] == 1.0
    flipped = q.flip(-1)
    dis = pseudolabel_stats([(obj.joint_pseudo_labels(q, flipped, 0.5), q, flipped)])
    assert dis["agreement"] == 0.0
    assert PseudoStats().summary() == {"source_img_frac": 0.0, "agreement": 0.0, "accepted_frac": 0.0}


@pytest.fixture(scope="module")
def small_split():
    cfg = RunConfig().replace(
        **{
            "data.train_per_class": 1,
            "data.pretrain_per_class": 1,
            "data.test_per_class": 20,
            "data.n_points": 256,
            "tokenizer.group_size": 16,
        }
    )
    ds = make_dataset(cfg.data, 0)
    tk = cfg.tokenizer
    return cfg, SplitTokens(ds.test, tk.n_groups, tk.group_size, tk.patch_size)


def test_random_model_is_near_chance(small_split):
    cfg, tokens = small_split
    accs = []
    for seed in range(6):
        torch.manual_seed(seed)
        accs.append(accuracy_branches(CrossModalModel.from_config(cfg), tokens)["acc_pcl"])
    assert abs(np.mean(accs) - 1 / 8) < 0.04


def test_single_view_star_equals_image(small_split):
    cfg, tokens = small_split
    torch.manual_seed(0)
    m = CrossModalModel.from_config(cfg)
    one = SplitTokens([s for s in tokens.samples], cfg.tokenizer.n_groups, cfg.tokenizer.group_size, cfg.tokenizer.patch_size)
    one.patches = one.patches[:, :1]
    r = accuracy_branches(m, one)
    assert r["acc_image_star"] == r["acc_image"]


def test_prototype_classifier_on_separable_embeddings(small_split):
    cfg, tokens = small_split
    torch.manual_seed(0)
    m = CrossModalModel.from_config(cfg)

    class Oracle(torch.nn.Module):
        """Embeds every input onto its true class axis, consuming rows in embed_split's order."""

        def __init__(self):
            super().__init__()
            labels = torch.from_numpy(tokens.labels)
            self.queues = {"img": labels.repeat_interleave(tokens.n_views), "pcl": labels}
            self.pos = {"img": 0, "pcl": 0}
            self.w = torch.nn.Parameter(torch.eye(8, cfg.model.d_embed))

        def _take(self, key, n):
            rows = self.queues[key][self.pos[key] : self.pos[key] + n]
            self.pos[key] += n
            return type("Out", (), {"embed": self.w[rows]})

        def encode_image(self, patches, mask=None):
            return self._take("img", patches.shape[0])

        def encode_points(self, groups, centers, mask=None):
            return self._take("pcl", groups.shape[0])

        def classify(self, e):
            return m.logit_scale * e @ self.w.t()

    r = accuracy_branches(Oracle(), tokens)
    assert r["acc_image"] == r["acc_image_star"] == r["acc_pcl"] == 1.0
    assert r["pred_bias_pcl"] == pytest.approx(0.0, abs=1e-12)


def test_accuracy_invariant_to_order(small_split):
    cfg, tokens = small_split
    torch.manual_seed(1)
    m = CrossModalModel.from_config(cfg)
    a = accuracy_branches(m, tokens)
    rev = SplitTokens(tokens.samples[::-1], cfg.tokenizer.n_groups, cfg.tokenizer.group_size, cfg.tokenizer.patch_size)
    b = accuracy_branches(m, rev)
    for k in ("acc_image", "acc_image_star", "acc_pcl", "pred_bias_img", "pred_bias_pcl"):
        assert a[k] == pytest.approx(b[k], abs=1e-12)


def test_dump_embeddings(tmp_path, small_split):
    cfg, tokens = small_split
    torch.manual_seed(0)
    m = CrossModalModel.from_config(cfg)
    path = tmp_path / "emb.csv"
    n = dump_embeddings(m, tokens, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert n == 2 * len(tokens.samples) == len(rows) - 1
    assert rows[0][:4] == EMBEDDING_HEADER and len(rows[0]) == 4 + cfg.model.d_embed
    vecs = np.array([[float(x) for x in r[4:]] for r in rows[1:]])
    np.testing.assert_allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-5)
    assert {r[1] for r in rows[1:]} == {"image", "pcl"}


def test_record_finiteness():
    rec = MetricRecord(0, 0.5, 0.5, 0.5, 0.1, 0.1, 0.0, 0.0).to_dict()
    assert is_finite_record(rec)
    rec["acc_pcl"] = float("nan")
    assert not is_finite_record(rec)
