import json

import numpy as np
import pytest

from latephase.data import (OOD_ID_OFFSET, OOD_LABEL, Dataset, Standardizer, SyntheticSpec,
                            class_counts, class_means, dataset_manifest, generate, load_csv,
                            make_ood, save_csv, split, write_manifest)
from latephase.errors import ConfigError, DataError
from latephase.models import init_params, loss_and_grads, mlp, predict_logits
from latephase.numerics import RngStream


def test_generate_deterministic_and_balanced():
    spec = SyntheticSpec(classes=3, features=4, n=301, seed=5)
    a, b = generate(spec), generate(spec)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels)
    assert counts.max() - counts.min() <= 1 and counts.sum() == 301
    assert class_counts(10, 3) == [4, 3, 3]
    other = generate(SyntheticSpec(classes=3, features=4, n=301, seed=6))
    assert not np.array_equal(a.features, other.features)


def test_draws_share_distribution_but_not_samples():
    spec = SyntheticSpec(n=400, seed=1)
    a, b = generate(spec), generate(spec, draw=1)
    assert not np.array_equal(a.features, b.features)
    assert not set(a.ids) & set(b.ids)
    for c in range(spec.classes):
        np.testing.assert_allclose(a.features[a.labels == c].mean(0),
                                   b.features[b.labels == c].mean(0), atol=0.6)


def test_class_means_pairwise_separation():
    spec = SyntheticSpec(classes=4, features=8, separation=3.0)
    m = class_means(spec)
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.linalg.norm(m[i] - m[j]) == pytest.approx(3.0, rel=1e-12)


def test_large_separation_is_linearly_separable():
    spec = SyntheticSpec(classes=3, features=4, separation=1e3, n=300, seed=2)
    data = generate(spec)
    x = (data.features - data.features.mean(0)) / data.features.std(0)
    net = mlp(4, [], 3, batchnorm=False)
    params, buffers = init_params(net, RngStream(0, 0))
    for _ in range(300):
        _, grads = loss_and_grads(net, params, buffers, x, data.labels)
        params = {k: params[k] - 0.5 * grads[k] for k in params}
    pred = predict_logits(net, params, buffers, x).argmax(1)
    assert np.mean(pred == data.labels) == 1.0


def test_rings_noise_free_on_circle():
    data = generate(SyntheticSpec(generator="rings", classes=3, features=2, noise=0.0, n=90))
    r = np.linalg.norm(data.features, axis=1)
    np.testing.assert_allclose(r, data.labels + 1.0, rtol=1e-14)


def test_spec_validation():
    for bad in (dict(generator="moons"), dict(classes=1), dict(separation=0.0),
                dict(generator="rings", features=3), dict(noise=-1.0), dict(n=2)):
        with pytest.raises(ConfigError):
            generate(SyntheticSpec(**bad))


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.array([[np.nan]]), [0], 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), [0, 2], 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), [0], 2)


def test_ood_null_and_novel_cluster():
    spec = SyntheticSpec(n=500, seed=3)
    null = make_ood(spec, shift=0.0, seed=2)
    assert null.is_ood and np.all(null.labels == OOD_LABEL)
    assert np.all(null.ids >= OOD_ID_OFFSET)
    np.testing.assert_allclose(null.features.mean(0), generate(spec).features.mean(0), atol=0.4)
    far = make_ood(spec, novel_cluster=True, spread=0.5, seed=1)
    np.testing.assert_allclose(far.features.mean(0), class_means(spec).mean(0), atol=0.1)
    assert far.features.std(0) == pytest.approx(np.full(spec.features, 0.5), rel=0.15)
    shifted = make_ood(spec, shift=50.0, seed=2)
    np.testing.assert_allclose(shifted.features - null.features, 50.0, rtol=1e-12)
    assert "novel_cluster" in far.provenance and "shift=50.0" in shifted.provenance


def test_ood_ids_disjoint_from_in_distribution():
    spec = SyntheticSpec(n=200)
    ood = make_ood(spec, shift=1.0)
    for draw in (0, 1, 2):
        assert not set(generate(spec, draw=draw).ids) & set(ood.ids)


def test_split_examples():
    data = generate(SyntheticSpec(n=203, classes=4, seed=0))
    train, test = split(data, (1.0, 0.0), seed=0)
    assert len(train) == 203 and len(test) == 0
    train, test = split(data, (0.7, 0.3), seed=0)
    assert not set(train.ids) & set(test.ids) and len(train) + len(test) == 203
    for c in range(4):
        n_c = np.sum(data.labels == c)
        assert abs(np.sum(train.labels == c) - 0.7 * n_c) <= 1
    again, _ = split(data, (0.7, 0.3), seed=0)
    other, _ = split(data, (0.7, 0.3), seed=1)
    assert np.array_equal(again.ids, train.ids)
    assert not np.array_equal(np.sort(other.ids), np.sort(train.ids))


def test_split_is_permutation_stable():
    data = generate(SyntheticSpec(n=150, seed=4))
    perm = np.random.default_rng(0).permutation(len(data))
    a = split(data, (0.6, 0.4), seed=3)
    b = split(data.subset(perm), (0.6, 0.4), seed=3)
    for x, y in zip(a, b):
        assert set(x.ids) == set(y.ids)


def test_split_errors():
    data = generate(SyntheticSpec(n=8, classes=4))
    with pytest.raises(ConfigError):
        split(data, (0.5, 0.4))
    with pytest.raises(DataError):
        split(data, (0.3, 0.3, 0.2, 0.2), seed=0)


def test_standardizer_uses_train_statistics():
    data = generate(SyntheticSpec(n=400, seed=1))
    train, test = split(data, (0.5, 0.5), seed=0)
    scaler = Standardizer.fit(train.features)
    z = scaler.apply(train).features
    np.testing.assert_allclose(z.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(0), 1, atol=1e-12)
    np.testing.assert_allclose(scaler.apply(test).features, (test.features - scaler.mean) / scaler.std)


def test_csv_roundtrip(tmp_path):
    data = generate(SyntheticSpec(n=50, seed=9))
    save_csv(data, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert np.array_equal(back.features, data.features)
    assert np.array_equal(back.labels, data.labels) and np.array_equal(back.ids, data.ids)
    assert back.provenance == data.provenance and back.classes == data.classes
    ood = make_ood(SyntheticSpec(n=20), shift=2.0)
    save_csv(ood, tmp_path / "o.csv")
    assert load_csv(tmp_path / "o.csv").provenance == ood.provenance


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("f0,f1\n1,2\n")
    with pytest.raises(DataError, match="label"):
        load_csv(p)
    p.write_text("f0,label\n")
    with pytest.raises(DataError, match="no data rows"):
        load_csv(p)
    p.write_text("f0,label\n1.0,0\nx,1\n")
    with pytest.raises(DataError) as info:
        load_csv(p)
    assert "3" in str(info.value)
    p.write_text("f0,label\n1.0,0,7\n")
    with pytest.raises(DataError):
        load_csv(p)


def test_manifest(tmp_path):
    spec = SyntheticSpec(n=30, seed=7)
    data = generate(spec)
    m = dataset_manifest(data, spec)
    assert (m["N"], m["F"], m["C"], m["seed"], m["generator"]) == (30, 8, 4, 7, "gauss_blobs")
    write_manifest(data, tmp_path / "m.json", spec)
    assert json.loads((tmp_path / "m.json").read_text()) == m
