import numpy as np
import pytest

from egorec import io
from egorec.config import TrainConfig
from egorec.diagnostics import (DiagnosticsError, compare_variants, dispersion,
                                export_embeddings, model_dispersion, parse_selector)
from egorec.synthetic import planted_preferences
from egorec.trainer import fit


def pairwise_oracle(x):
    n = len(x)
    total, count = 0.0, 0
    for i in range(n):
        for j in range(i + 1, n):
            c = x[i] @ x[j] / (np.linalg.norm(x[i]) * np.linalg.norm(x[j]))
            total += 1 - c
            count += 1
    return total / count


@pytest.fixture(scope="module")
def trained():
    ds, feats = planted_preferences(n_users=20, n_items=30, n_groups=3, seed=1)
    cfg = TrainConfig(lr=1e-2, dim=4, layers=2, knn_k=3, batch_size=64, max_epochs=2, seed=2)
    return ds, fit(ds, feats, cfg).model, fit(ds, feats, cfg.replace(seed=3)).model


def test_identical_rows_zero():
    r = dispersion(np.tile([[1.0, -2.0, 0.5]], (6, 1)))
    assert r.mean_pairwise_cosine_distance == pytest.approx(0.0, abs=1e-15)
    assert r.mean_nearest_neighbor_similarity == pytest.approx(1.0)


def test_antipodal_pair_two():
    r = dispersion(np.array([[1.0, 2.0], [-1.0, -2.0]]))
    assert r.mean_pairwise_cosine_distance == pytest.approx(2.0)
    assert r.num_pairs == 1 and r.exact


def test_exact_matches_double_loop(rng):
    x = rng.normal(size=(25, 5))
    np.testing.assert_allclose(dispersion(x).mean_pairwise_cosine_distance, pairwise_oracle(x),
                               rtol=1e-12)


def test_sampled_within_three_standard_errors(rng):
    x = rng.normal(size=(400, 3)) + 0.5
    exact = dispersion(x, exact=True)
    approx = dispersion(x, sample_pairs=20_000, seed=4, exact=False)
    assert not approx.exact and approx.num_pairs == 20_000
    assert abs(approx.mean_pairwise_cosine_distance -
               exact.mean_pairwise_cosine_distance) < 3 * approx.std_error


def test_scale_invariant(rng):
    x = rng.normal(size=(30, 4))
    a = dispersion(x).mean_pairwise_cosine_distance
    b = dispersion(x * rng.uniform(0.1, 10, size=(30, 1))).mean_pairwise_cosine_distance
    assert a == pytest.approx(b, rel=1e-12)


def test_too_few_rows():
    with pytest.raises(DiagnosticsError):
        dispersion(np.ones((1, 3)))


def test_model_groups_and_compare(trained):
    ds, a, b = trained
    r = model_dispersion(a)
    assert set(r.groups) == {"user", "item"}
    assert r.groups["user"].num_rows == ds.num_users
    ab, ba = compare_variants(a, b), compare_variants(b, a)
    for k, v in ab.deltas.items():
        assert v == pytest.approx(-ba.deltas[k], abs=1e-15)
    assert ab.a_more_dispersed != ba.a_more_dispersed
    assert compare_variants(a, a).verdict() == "equal dispersion"


def test_selectors():
    assert parse_selector("fused", ("v", "t")) == [("fused", None)]
    assert parse_selector("ego", ("v", "t")) == [("ego", "v"), ("ego", "t")]
    assert parse_selector("neighbor:t", ("v", "t")) == [("neighbor", "t")]
    assert len(parse_selector("all", ("v", "t"))) == 7
    for bad in ("nope", "ego:x"):
        with pytest.raises(DiagnosticsError):
            parse_selector(bad, ("v", "t"))


def test_export_round_trip(tmp_path, trained):
    ds, model, _ = trained
    paths = export_embeddings(model, ds, "all", tmp_path)
    assert sorted(p.name for p in paths) == sorted(
        ["fused.mmft"] + [f"{k}_{m}.mmft" for k in ("ego", "neighbor", "modal_final")
                          for m in ("v", "t")])
    trace = model.forward()
    fused = io.read_matrix(tmp_path / "fused.mmft")
    np.testing.assert_array_equal(fused, trace.fused)
    assert fused.shape == (ds.num_users + ds.num_items, 2 * model.params.dim)
    np.testing.assert_array_equal(io.read_matrix(tmp_path / "ego_v.mmft"), trace.ego["v"])
    tokens = io.read_tokens(tmp_path / "neighbor_t.mmft")
    assert tokens[0] == f"u:{ds.user_tokens[0]}" and tokens[-1] == f"i:{ds.item_tokens[-1]}"
