import filecmp
import json

import numpy as np
import pytest

from camtopo.forest import similarity
from camtopo.sim import (
    Change,
    GroundTruth,
    ScenarioError,
    ScenarioSpec,
    chain_scenario,
    default_scenario,
    drift_scenario,
    export_scenario,
    generate,
    identity_latents,
    load_spec,
    perturb,
    save_spec,
)


def test_default_scenario_shape():
    spec = default_scenario(0)
    assert len(spec.cameras) == 5 and len(spec.links) == 8 and spec.n_persons == 300
    assert all(3 <= l.sigma <= 8 and 25 <= l.mu <= 45 for l in spec.links)


def test_noiseless_identities():
    spec = chain_scenario(2, seed=0, n_persons=2, appearance_noise=0.0, latent_dim=4, feature_dim=4,
                          min_separation=0.5, duration=600)
    data, gt = generate(spec)
    latents = identity_latents(2, 4, 4, 0.5, np.random.default_rng(spec.seed))
    for tr in data.values():
        for t in tr:
            np.testing.assert_allclose(t.features, np.repeat(latents[t.person_id][None], t.n_observations, 0))
    for p in gt.pairs:
        a = next(t for t in data[p.exit[0]] if t.person_id == p.exit[1])
        b = next(t for t in data[p.entry[0]] if t.person_id == p.entry[1])
        assert similarity(a.features, b.features) == pytest.approx(1.0)
    assert np.linalg.norm(latents[0] - latents[1]) >= 0.5


def test_link_sample_statistics():
    spec = chain_scenario(2, seed=1, mus=[30.0, 30.0], sigmas=[5.0, 5.0], prob=1.0, n_persons=3300,
                          duration=30000, min_separation=0.0)
    _, gt = generate(spec)
    x = gt.link_samples(spec.links[0].key)
    assert len(x) >= 1000
    assert abs(x.mean() - 30) <= 0.5 and abs(x.std() - 5) <= 0.4


def test_shift_change():
    spec = drift_scenario(0, n_persons=600, init_duration=1800, online_duration=1800)
    _, gt = generate(spec)
    key = spec.links[0].key
    before = gt.link_samples(key, phase="init")
    after = gt.link_samples(key, after=spec.split_time)
    assert abs(before.mean() - 30) < 2 and abs(after.mean() - 40) < 2


def test_noop_and_remove_change(tmp_path):
    spec = chain_scenario(2, seed=3, n_persons=80, duration=1200)
    a, gta = generate(spec)
    b, gtb = generate(perturb(spec, None))
    assert [p.delta_t for p in gta.pairs] == [p.delta_t for p in gtb.pairs]
    key = spec.links[0].key
    removed = perturb(spec, Change("remove", 600.0, key))
    _, gtr = generate(removed)
    assert not [p for p in gtr.pairs if p.link == key and p.exit_time >= 600.0]


def test_same_seed_same_files(tmp_path):
    spec = chain_scenario(2, seed=7, n_persons=40, duration=900)
    export_scenario(spec, tmp_path / "a")
    export_scenario(spec, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a" / "init", tmp_path / "b" / "init")
    assert not cmp.diff_files and not cmp.left_only
    assert filecmp.cmp(tmp_path / "a" / "ground_truth.json", tmp_path / "b" / "ground_truth.json", shallow=False)


def test_spec_round_trip(tmp_path):
    spec = drift_scenario(2)
    save_spec(spec, tmp_path / "s.json")
    assert load_spec(tmp_path / "s.json") == spec


def test_ground_truth_round_trip(tmp_path):
    spec = chain_scenario(2, seed=5, n_persons=30, duration=600)
    _, gt = generate(spec)
    gt.save(tmp_path / "gt.json")
    back = GroundTruth.load(tmp_path / "gt.json")
    assert back.true_pairs() == gt.true_pairs()


@pytest.mark.parametrize("field,value", [("n_persons", 0), ("duration", -1.0), ("latent_dim", 0),
                                         ("appearance_noise", -0.1)])
def test_bad_spec_names_field(field, value):
    doc = chain_scenario(2).to_dict()
    doc[field] = value
    with pytest.raises(ScenarioError, match=f"'{field}'"):
        ScenarioSpec.from_dict(doc)


def test_unknown_field():
    doc = chain_scenario(2).to_dict()
    doc["bogus"] = 1
    with pytest.raises(ScenarioError, match="bogus"):
        ScenarioSpec.from_dict(doc)
