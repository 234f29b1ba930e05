"""Synthetic phantom generator: geometry, determinism, dataset layout."""

import json

import numpy as np
import pytest

from ctb.errors import DataError
from ctb.phantom import (DEFAULT_LESION_COUNTS, NODULE_LESION_COUNTS,
                         PhantomSpec, generate_case, generate_case_with_truth,
                         generate_dataset, load_manifest, split_sizes)
from ctb.volume import load_annotations, load_volume


@pytest.fixture(scope="module")
def diseased_case():
    return generate_case_with_truth(PhantomSpec(), 7, "d0", diseased=True)


class TestGeometry:
    def test_volume_layout(self, diseased_case):
        vol, _, _ = diseased_case
        assert vol.voxels.shape == (190, 230, 280)  # (nz, ny, nx)
        assert vol.voxels.dtype == np.int16
        assert vol.spacing == (1.0, 1.0, 1.0)

    def test_region_means(self, diseased_case):
        vol, _, truth = diseased_case
        hu = vol.voxels.astype(np.float64)
        exterior = ~truth.body
        assert abs(hu[exterior].mean() - (-1000)) < 2.0
        lungs = truth.lung_left | truth.lung_right
        wall = truth.body & ~lungs
        assert abs(hu[wall].mean() - 40) < 2.0
        # lesions shift the lung mean a little, never by tens of HU
        assert abs(hu[lungs].mean() - (-800)) < 30.0

    def test_lung_volume_matches_analytic(self, diseased_case):
        _, _, truth = diseased_case
        spec = PhantomSpec()
        want = spec.lung_volume_cm3()
        for side in (truth.lung_left, truth.lung_right):
            got = side.sum() / 1000.0  # 1 mm voxels
            assert abs(got - want) / want < 0.01

    def test_lungs_disjoint_and_inside_body(self, diseased_case):
        _, _, truth = diseased_case
        assert not (truth.lung_left & truth.lung_right).any()
        assert not (truth.lung_left & ~truth.body).any()
        assert not (truth.lung_right & ~truth.body).any()


class TestLesions:
    def test_default_profile_counts(self, diseased_case):
        _, annotations, _ = diseased_case
        types = sorted(a.lesion_type for a in annotations)
        want = []
        for t in sorted(DEFAULT_LESION_COUNTS):
            want.extend([t] * DEFAULT_LESION_COUNTS[t])
        assert types == want
        assert len(annotations) == sum(DEFAULT_LESION_COUNTS.values())

    def test_nodule_profile_counts(self):
        spec = PhantomSpec(lesion_counts=dict(NODULE_LESION_COUNTS))
        _, annotations = generate_case(spec, 3, "n0", diseased=True)
        assert [a.lesion_type for a in annotations] == [4, 4, 4]

    def test_healthy_case_has_no_lesions(self):
        vol, annotations = generate_case(PhantomSpec(), 7, "h0", diseased=False)
        assert annotations == []

    def test_centers_on_lattice(self):
        for seed in (7, 8, 9):
            _, annotations = generate_case(PhantomSpec(), seed, diseased=True)
            for a in annotations:
                for c in (a.box.cx, a.box.cy, a.box.cz):
                    assert (c - 2.0) % 4.0 == pytest.approx(0.0, abs=1e-9)

    def test_boxes_inside_a_lung(self, diseased_case):
        _, annotations, _ = diseased_case
        spec = PhantomSpec()
        la, lb, lc = spec.lung_semi
        for a in annotations:
            ok = False
            for lx, ly, lz in spec.lung_centers():
                h = a.box.d / 2.0
                worst = 0.0
                for sx in (-1, 1):
                    for sy in (-1, 1):
                        for sz in (-1, 1):
                            worst = max(worst, (
                                ((a.box.cx + sx * h - lx) / la) ** 2
                                + ((a.box.cy + sy * h - ly) / lb) ** 2
                                + ((a.box.cz + sz * h - lz) / lc) ** 2))
                ok = ok or worst <= 1.0
            assert ok

    def test_boxes_keep_min_gap(self, diseased_case):
        _, annotations, _ = diseased_case
        spec = PhantomSpec()
        boxes = [a.box for a in annotations]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                gap = max(
                    abs(a.cx - b.cx), abs(a.cy - b.cy),
                    abs(a.cz - b.cz)) - (a.d + b.d) / 2.0
                assert gap >= spec.min_gap_mm - 1e-9

    def test_sizes_within_declared_ranges(self, diseased_case):
        _, annotations, _ = diseased_case
        spec = PhantomSpec()
        for a in annotations:
            lo, hi = spec.size_ranges[a.lesion_type]
            assert lo <= a.box.d <= hi

    def test_calcified_core_exceeds_marker_threshold(self):
        spec = PhantomSpec(calcification_prob=1.0)
        vol, annotations, _ = generate_case_with_truth(spec, 21, diseased=True)
        tub = [a for a in annotations if a.lesion_type == 4]
        assert len(tub) == 1
        b = tub[0].box
        win = vol.voxels[int(b.cz) - 2:int(b.cz) + 2,
                         int(b.cy) - 2:int(b.cy) + 2,
                         int(b.cx) - 2:int(b.cx) + 2]
        assert (win > 120).sum() >= 3

    def test_uncalcified_core_stays_soft(self):
        spec = PhantomSpec(calcification_prob=0.0)
        vol, annotations, _ = generate_case_with_truth(spec, 21, diseased=True)
        tub = [a for a in annotations if a.lesion_type == 4]
        b = tub[0].box
        win = vol.voxels[int(b.cz) - 2:int(b.cz) + 2,
                         int(b.cy) - 2:int(b.cy) + 2,
                         int(b.cx) - 2:int(b.cx) + 2]
        assert not (win > 120).any()

    def test_placement_failure_raises(self):
        spec = PhantomSpec(size_ranges={**PhantomSpec().size_ranges,
                                        5: (200.0, 200.0)},
                           max_place_tries=20)
        with pytest.raises(DataError):
            generate_case(spec, 0, diseased=True)


class TestDeterminism:
    def test_same_seed_same_case(self, diseased_case):
        vol, annotations, _ = diseased_case
        vol2, ann2 = generate_case(PhantomSpec(), 7, "d0", diseased=True)
        assert np.array_equal(vol.voxels, vol2.voxels)
        assert [(a.box, a.lesion_type) for a in annotations] == \
               [(a.box, a.lesion_type) for a in ann2]

    def test_different_seed_differs(self, diseased_case):
        vol, _, _ = diseased_case
        vol2, _ = generate_case(PhantomSpec(), 8, "d0", diseased=True)
        assert not np.array_equal(vol.voxels, vol2.voxels)


class TestSplitSizes:
    def test_reference_sizes(self):
        assert split_sizes(100) == (75, 10, 15)
        assert split_sizes(20) == (15, 2, 3)
        assert split_sizes(50) == (38, 5, 7)

    def test_tiny_and_total(self):
        assert split_sizes(1) == (1, 0, 0)
        for n in range(1, 60):
            train, val, test = split_sizes(n)
            assert train + val + test == n
            assert min(train, val, test) >= 0


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    manifest = generate_dataset(PhantomSpec(), 8, 0.5, 99, out)
    return out, manifest


class TestDataset:
    def test_manifest_counts(self, dataset):
        _, manifest = dataset
        assert manifest["n_cases"] == 8
        assert manifest["counts"]["diseased"] == 4
        assert manifest["counts"]["healthy"] == 4
        assert manifest["counts"]["split"] == {"train": 6, "val": 1, "test": 1}

    def test_cohorts_interleaved(self, dataset):
        _, manifest = dataset
        cohorts = [c["cohort"] for c in manifest["cases"]]
        assert cohorts == ["diseased", "healthy"] * 4

    def test_split_assignment_in_order(self, dataset):
        _, manifest = dataset
        splits = [c["split"] for c in manifest["cases"]]
        assert splits == ["train"] * 6 + ["val", "test"]

    def test_every_split_sees_both_cohorts_when_possible(self, tmp_path):
        manifest = generate_dataset(PhantomSpec(dims=(120, 120, 120),
                                                body_semi=(55.0, 55.0),
                                                body_z=(5.0, 115.0),
                                                lung_semi=(20.0, 30.0, 40.0),
                                                lung_offset_x=28.0,
                                                lung_center_z=60.0,
                                                lesion_counts={4: 1}),
                                    20, 0.5, 3, tmp_path)
        by_split = {}
        for c in manifest["cases"]:
            by_split.setdefault(c["split"], set()).add(c["cohort"])
        assert by_split["train"] == {"diseased", "healthy"}
        assert by_split["val"] == {"diseased", "healthy"}
        assert by_split["test"] == {"diseased", "healthy"}

    def test_files_and_annotations_consistent(self, dataset):
        out, manifest = dataset
        annotations = load_annotations(out / manifest["annotations"])
        by_case = {}
        for a in annotations:
            by_case[a.case_id] = by_case.get(a.case_id, 0) + 1
        for row in manifest["cases"]:
            vol = load_volume(out / row["file"])
            assert vol.voxels.shape == (190, 230, 280)
            assert by_case.get(row["case_id"], 0) == row["lesions"]
            per_case = sum(DEFAULT_LESION_COUNTS.values())
            want = per_case if row["cohort"] == "diseased" else 0
            assert row["lesions"] == want
        per_type = manifest["counts"]["lesions_per_type"]
        assert sum(per_type.values()) == len(annotations)

    def test_dataset_deterministic(self, dataset, tmp_path):
        out, _ = dataset
        generate_dataset(PhantomSpec(), 8, 0.5, 99, tmp_path)
        a = (out / "case_0000.ctv").read_bytes()
        b = (tmp_path / "case_0000.ctv").read_bytes()
        assert a == b
        ma = (out / "manifest.json").read_text()
        mb = (tmp_path / "manifest.json").read_text()
        assert ma == mb

    def test_failed_run_leaves_no_manifest(self, tmp_path):
        spec = PhantomSpec(size_ranges={**PhantomSpec().size_ranges,
                                        5: (200.0, 200.0)},
                           max_place_tries=20)
        with pytest.raises(DataError):
            generate_dataset(spec, 4, 0.0, 0, tmp_path)
        assert not (tmp_path / "manifest.json").exists()

    def test_argument_validation(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(PhantomSpec(), 0, 0.5, 0, tmp_path)
        with pytest.raises(ValueError):
            generate_dataset(PhantomSpec(), 4, 1.5, 0, tmp_path)

    def test_load_manifest_round_trip(self, dataset):
        out, manifest = dataset
        # tuples in the returned dict come back as lists from disk
        want = json.loads(json.dumps(manifest))
        assert load_manifest(out / "manifest.json") == want

    def test_load_manifest_errors(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"annotations": "a.csv", "spec": {}}))
        with pytest.raises(DataError):
            load_manifest(bad)


class TestSpecValidation:
    def test_default_spec_valid(self):
        PhantomSpec()

    def test_rejections(self):
        with pytest.raises(ValueError):
            PhantomSpec(dims=(4, 4, 4))
        with pytest.raises(ValueError):
            PhantomSpec(body_semi=(200.0, 80.0))
        with pytest.raises(ValueError):
            PhantomSpec(lung_offset_x=80.0)
        with pytest.raises(ValueError):
            PhantomSpec(lung_center_z=20.0)
        with pytest.raises(ValueError):
            PhantomSpec(lesion_counts={9: 1})
        with pytest.raises(ValueError):
            PhantomSpec(size_ranges={4: (0.0, 5.0)})
        with pytest.raises(ValueError):
            PhantomSpec(calcification_prob=1.5)
        with pytest.raises(ValueError):
            # every counted lesion type needs a size range
            PhantomSpec(size_ranges={5: (20.0, 30.0)})
