import itertools
import json

import numpy as np
import pytest

from relgnn import numeric as nm
from relgnn.errors import ConfigurationError, InputError, ParseError, ValidationError
from relgnn.data import (DatasetManifest, SyntheticConfig, Template, binarize_intensity,
                         dataset_from_synthetic, generate_synthetic, labels_to_csv, load_dataset,
                         load_features, load_labels, make_folds, parse_labels,
                         population_edge_stats, write_labels, write_synthetic)
from relgnn.graph import compute_edge_stats, threshold_edges
from relgnn.regional import crop_origin

CSV = "subject,frame,AU1,AU2,AU4\nS1,0,1,0,1\nS1,1,0,0,0\nS2,0,1,1,0\n"


def small_cfg(**kw):
    base = dict(au_ids=[1, 2, 4, 6], templates=[Template([1, 2], 0.95, 0.3), Template([4, 6], 0.9, 0.3)],
                background=0.05, samples=200, subjects=4, noise=1.0, signal=2.0, scale_channels=[2, 3])
    base.update(kw)
    return SyntheticConfig(**base)


class TestIntensity:
    def test_examples(self):
        assert binarize_intensity(2) == 1
        assert binarize_intensity(0) == 0
        assert binarize_intensity([0, 1, 2, 3, 4, 5]).tolist() == [0, 0, 1, 1, 1, 1]

    def test_range(self):
        with pytest.raises(ValidationError):
            binarize_intensity([6])


class TestFolds:
    def test_examples(self):
        f = make_folds(["a", "b", "c"], 3, 0)
        assert sorted(f.values()) == [0, 1, 2]
        assert make_folds(["a", "b", "c"], 3, 5) == make_folds(["c", "b", "a", "a"], 3, 5)

    def test_41_subjects(self):
        f = make_folds([f"S{i}" for i in range(41)], 3, 1)
        assert sorted(np.bincount(list(f.values())).tolist()) == [13, 14, 14]

    def test_seed_changes_assignment(self):
        subjects = [f"S{i}" for i in range(30)]
        assert make_folds(subjects, 3, 0) != make_folds(subjects, 3, 1)

    def test_too_few(self):
        with pytest.raises(InputError):
            make_folds(["a", "b"], 3)


class TestLabelsCSV:
    def test_parse(self):
        t = parse_labels(CSV)
        assert t.au_ids == [1, 2, 4]
        assert t.rows.tolist() == [[1, 0, 1], [0, 0, 0], [1, 1, 0]]
        assert t.subjects == ["S1", "S1", "S2"]

    def test_crlf(self):
        a = parse_labels(CSV)
        b = parse_labels(CSV.replace("\n", "\r\n"))
        np.testing.assert_array_equal(a.rows, b.rows)
        assert a.subjects == b.subjects and a.frames == b.frames

    def test_select_columns(self):
        assert parse_labels(CSV, [1, 4]).rows.tolist() == [[1, 1], [0, 0], [1, 0]]
        with pytest.raises(ValidationError):
            parse_labels(CSV, [4, 1])

    def test_intensity(self):
        text = "subject,frame,AU12\nS,0,3\nS,1,1\n"
        assert parse_labels(text, intensity=True).rows.tolist() == [[1], [0]]

    def test_round_trip(self, tmp_path):
        t = parse_labels(CSV)
        write_labels(tmp_path / "l.csv", t)
        back = load_labels(tmp_path / "l.csv")
        np.testing.assert_array_equal(back.rows, t.rows)
        assert back.subjects == t.subjects and back.frames == t.frames
        assert labels_to_csv(back) == CSV

    @pytest.mark.parametrize("text,match", [
        ("subject,frame,AU1\nS,0,2\n", "line 2"),
        ("subject,frame,AU1\nS,0,1\nS,1\n", "line 3"),
        ("frame,subject,AU1\n", "line 1"),
        ("subject,frame,XY\n", "line 1"),
        ("", "line 1"),
    ])
    def test_parse_errors(self, text, match):
        with pytest.raises(ParseError, match=match):
            parse_labels(text)

    def test_missing_column(self):
        with pytest.raises(ParseError, match="AU7"):
            parse_labels(CSV, [1, 7])

    def test_no_rows(self):
        with pytest.raises(InputError):
            parse_labels("subject,frame,AU1\n")


class TestManifest:
    def test_write_and_load(self, tmp_path):
        ds = generate_synthetic(small_cfg(samples=20))
        man = write_synthetic(ds, tmp_path, k=2, fold_seed=3)
        back = DatasetManifest.load(tmp_path / "manifest.json")
        assert back.to_obj() == man.to_obj()
        assert back.fold_seed == 3 and back.scale_channels == [2, 3]
        loaded = load_dataset(back)
        np.testing.assert_array_equal(loaded.features, ds.features)
        np.testing.assert_array_equal(loaded.labels.rows, ds.labels.rows)
        assert loaded.regions.entries == ds.regions.entries
        assert sorted(set(loaded.folds.values())) == [0, 1]
        assert len(loaded.fold_indices(0)) + len(loaded.fold_indices(1)) == 20

    def test_per_file_features(self, tmp_path, rng):
        a, b = rng.normal(size=(2, 14, 14)), rng.normal(size=(3, 14, 14))
        nm.save_tensor(tmp_path / "a.rgt", a)
        nm.save_tensor(tmp_path / "b.rgt", b)
        fs = load_features({"features": ["a.rgt", "b.rgt"]}, tmp_path)
        assert fs.channels == 5
        np.testing.assert_array_equal(fs.maps[1], b)
        nm.save_tensor(tmp_path / "c.rgt", np.concatenate([a, b]))
        split = load_features({"features": "c.rgt"}, tmp_path, [2, 3])
        np.testing.assert_array_equal(split.maps[0], a)
        with pytest.raises(ValidationError):
            load_features({"features": "c.rgt"}, tmp_path, [2, 2])

    def test_parse_errors(self):
        with pytest.raises(ParseError, match="line 1"):
            DatasetManifest.from_json("{")
        with pytest.raises(ParseError, match="samples"):
            DatasetManifest.from_json('{"name": "x", "au_ids": [1]}')
        with pytest.raises(ParseError, match=r"samples\[0\]"):
            DatasetManifest.from_json('{"name": "x", "au_ids": [1], "samples": [{"id": 1}]}')

    def test_missing_fold(self, tmp_path):
        ds = generate_synthetic(small_cfg(samples=8))
        write_synthetic(ds, tmp_path, k=2)
        obj = json.loads((tmp_path / "manifest.json").read_text())
        obj["folds"].pop(next(iter(obj["folds"])))
        with pytest.raises(ValidationError, match="fold"):
            load_dataset(DatasetManifest.from_json(json.dumps(obj), tmp_path))


class TestSyntheticConfig:
    @pytest.mark.parametrize("kw", [
        dict(background=1.5),
        dict(au_ids=[2, 1, 4, 6]),
        dict(templates=[Template([1, 9])]),
        dict(templates=[Template([1, 2], rate=0.7), Template([4, 6], rate=0.5)]),
        dict(exclusions=[(1, 2)]),
        dict(subjects=500),
        dict(noise=-1.0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            small_cfg(**kw)

    def test_obj_round_trip(self):
        cfg = small_cfg(exclusions=[(2, 4)], signal_scale={2: 0.5})
        back = SyntheticConfig.from_obj(json.loads(json.dumps(cfg.to_obj())))
        assert back == cfg
        with pytest.raises(ConfigurationError):
            SyntheticConfig.from_obj({"au_ids": [1], "templates": [], "bogus": 1})


class TestSynthetic:
    def test_deterministic(self):
        a, b = generate_synthetic(small_cfg(seed=4)), generate_synthetic(small_cfg(seed=4))
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels.rows, b.labels.rows)
        c = generate_synthetic(small_cfg(seed=5))
        assert not np.array_equal(a.labels.rows, c.labels.rows)

    def test_shapes_and_subjects(self):
        ds = generate_synthetic(small_cfg())
        assert ds.features.shape == (200, 5, 14, 14)
        assert len(set(ds.labels.subjects)) == 4
        assert [m.shape[0] for m in ds.stacks()[0].maps] == [2, 3]

    def test_signal_placement(self):
        cfg = small_cfg(noise=0.0, signal=1.0, background=0.0)
        ds = generate_synthetic(cfg)
        centers = ds.regions.grid_centers()
        for i in range(20):
            expect = np.zeros((5, 14, 14))
            for k in range(4):
                if ds.labels.rows[i, k]:
                    for side in (2 * k, 2 * k + 1):
                        r0, c0 = crop_origin(centers[side])
                        expect[k % 5, r0:r0 + 6, c0:c0 + 6] += 1.0
            np.testing.assert_array_equal(ds.features[i], expect)

    def test_exclusions_hold(self):
        cfg = small_cfg(background=0.5, exclusions=[(1, 4)], samples=500)
        rows = generate_synthetic(cfg).labels.rows
        assert not (rows[:, 0] & rows[:, 2]).any()

    def test_population_is_distribution(self):
        cfg = small_cfg(exclusions=[(2, 6)], background=0.2)
        s = population_edge_stats(cfg)
        assert np.all((s.marginal >= 0) & (s.marginal <= 1))
        np.testing.assert_allclose(np.diag(s.conditional), 1.0, atol=1e-15)

    def test_population_by_brute_force(self):
        # independent enumeration over every random choice of the sampler
        cfg = small_cfg(templates=[Template([1, 2, 4], 0.8, 0.4), Template([6], 1.0, 0.3)],
                        exclusions=[(2, 6)], background=0.15)
        c = 4
        joint = np.zeros((c, c))
        outcomes = [(t, cfg.templates[t].rate) for t in range(2)] + [(None, 0.3)]
        for t, pt in outcomes:
            for co in itertools.product((0, 1), repeat=c):
                for bg in itertools.product((0, 1), repeat=c):
                    p = pt
                    y = [0] * c
                    for k in range(c):
                        p *= cfg.background if bg[k] else 1 - cfg.background
                        y[k] |= bg[k]
                    if t is not None:
                        tmpl = cfg.templates[t]
                        ks = [cfg.au_ids.index(a) for a in tmpl.aus]
                        y[ks[0]] = 1
                        for k in range(c):
                            if k in ks[1:]:
                                p *= tmpl.coactivation if co[k] else 1 - tmpl.coactivation
                                y[k] |= co[k]
                            elif co[k]:
                                p = 0.0
                    elif any(co):
                        p = 0.0
                    if y[1] and y[3]:
                        y[3] = 0
                    v = np.array(y, float)
                    joint += p * np.outer(v, v)
        s = population_edge_stats(cfg)
        np.testing.assert_allclose(s.cooccurrence_counts, joint, rtol=0, atol=1e-14)

    def test_converges_to_population(self):
        cfg = small_cfg(samples=10000, exclusions=[(2, 4)], background=0.1, seed=11)
        emp = compute_edge_stats(generate_synthetic(cfg).labels)
        pop = population_edge_stats(cfg)
        assert np.abs(emp.marginal - pop.marginal).max() <= 0.02
        assert np.abs(emp.conditional - pop.conditional).max() <= 0.02

    def test_planted_edges_recovered(self):
        cfg = small_cfg(samples=5000, seed=2)
        pop = population_edge_stats(cfg)
        p_pop, n_pop = threshold_edges(pop)
        p_emp, n_emp = threshold_edges(compute_edge_stats(generate_synthetic(cfg).labels))
        np.testing.assert_array_equal(p_emp, p_pop)
        np.testing.assert_array_equal(n_emp, n_pop)
        assert p_pop[0, 1] and p_pop[2, 3] and n_pop[0, 2]

    def test_dataset_from_synthetic(self):
        ds = dataset_from_synthetic(generate_synthetic(small_cfg()), 2, 0)
        assert set(ds.folds.values()) == {0, 1}
        assert ds.num_samples == 200
        idx = ds.subject_indices(["S000"])
        assert all(ds.subjects[i] == "S000" for i in idx) and len(idx) == 50
