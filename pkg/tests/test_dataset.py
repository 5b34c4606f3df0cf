"""Scenario family, catalog ingestion, and dataset pipeline tests.

The two-cell catalog oracle pins the density-flattening math: with 1000
objects in one occupancy cell and 10 in another, the aggregate draw weights
are log(1001) and log(11), so a single weighted draw must land in the dense
cell with probability log(1001) / (log(1001) + log(11)) ~ 0.7423. The Monte
Carlo check sits on top of an exact per-object weight assertion, so a miss
isolates the sampler rather than the weights.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from rdvtrade import dataset, ocp

from conftest import toy_scenario


class TestFamilies:
    def test_leo_samples_are_valid_and_on_grid(self):
        family = dataset.LeoFamily()
        scenarios = dataset.sample_scenarios(family, 20, seed=3)
        assert len(scenarios) == 20
        for idx, sc in enumerate(scenarios):
            sc.validate()
            assert sc.family == "leo"
            assert sc.n_steps in family.n_choices
            assert sc.dt == pytest.approx(171.4)
            assert sc.scenario_id == f"leo-00000003-{idx:05d}"
            assert not sc.relax_terminal_safety

    def test_leo_initial_conditions_cover_the_box(self):
        family = dataset.LeoFamily()
        grids = family.grids()
        assert grids["r_r"].min() == pytest.approx(-5400.0)
        assert grids["r_r"].max() == pytest.approx(-2600.0)
        assert grids["r_t"].min() == pytest.approx(-20500.0)
        assert grids["r_t"].max() == pytest.approx(-14500.0)
        assert len(grids["v_t"]) == 100

    def test_elliptic_samples_are_valid(self):
        family = dataset.EllipticFamily()
        scenarios = dataset.sample_scenarios(family, 8, seed=5)
        for sc in scenarios:
            sc.validate()
            assert sc.family == "elliptic"
            assert sc.dt == pytest.approx(440.8)
            assert sc.n_steps in family.n_choices
            assert sc.relax_terminal_safety

    def test_same_seed_is_reproducible(self):
        family = dataset.LeoFamily()
        a = dataset.sample_scenarios(family, 6, seed=11)
        b = dataset.sample_scenarios(family, 6, seed=11)
        assert [sc.to_dict() for sc in a] == [sc.to_dict() for sc in b]

    def test_different_seeds_differ(self):
        family = dataset.LeoFamily()
        a = dataset.sample_scenarios(family, 6, seed=11)
        b = dataset.sample_scenarios(family, 6, seed=12)
        assert [sc.to_dict() for sc in a] != [sc.to_dict() for sc in b]


class TestSplit:
    def test_split_is_deterministic(self):
        for sid in ("leo-00000007-00001", "elliptic-00000002-00042"):
            assert dataset.split_of(sid) == dataset.split_of(sid)
            assert dataset.split_of(sid) in ("train", "val")

    def test_split_fraction_is_calibrated(self):
        ids = [f"leo-{seed:08d}-{idx:05d}" for seed in range(10) for idx in range(100)]
        frac = np.mean([dataset.split_of(sid) == "train" for sid in ids])
        assert abs(frac - 0.9) < 0.03

    def test_split_extremes(self):
        sid = "leo-00000007-00001"
        assert dataset.split_of(sid, train_fraction=1.0) == "train"
        assert dataset.split_of(sid, train_fraction=0.0) == "val"


def write_catalog(path, rows):
    lines = [",".join(dataset.CATALOG_COLUMNS)]
    for row in rows:
        lines.append(",".join(str(row.get(col, "")) for col in dataset.CATALOG_COLUMNS))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def catalog_row(object_id, a_km=7000.0, e=0.01, i_deg=50.0):
    return {
        "object_id": object_id,
        "a_km": a_km,
        "e": e,
        "i_deg": i_deg,
        "raan_deg": 10.0,
        "argp_deg": 20.0,
        "M_deg": 30.0,
        "epoch_iso": "2025-03-01T00:00:00",
    }


class TestCatalog:
    def test_filters_and_canonical_order(self, tmp_path):
        path = tmp_path / "catalog.csv"
        write_catalog(
            path,
            [
                catalog_row("B-2", a_km=7200.0),
                catalog_row("A-1", a_km=6800.0),
                catalog_row("C-3", a_km=12000.0),  # above the box
                catalog_row("D-4", e=0.5),  # too eccentric
                catalog_row("E-5", i_deg=120.0),  # retrograde
            ],
        )
        skipped: list[int] = []
        entries = dataset.ingest_catalog(path, skipped=skipped)
        assert [e.object_id for e in entries] == ["A-1", "B-2"]
        # Out-of-box rows are filtered, not malformed.
        assert skipped == [0]

    def test_malformed_rows_are_skipped_and_counted(self, tmp_path):
        path = tmp_path / "catalog.csv"
        write_catalog(
            path,
            [
                catalog_row("A-1"),
                catalog_row("B-2", a_km="not-a-number"),
                catalog_row("C-3", e="nan"),
                catalog_row("D-4"),
            ],
        )
        skipped: list[int] = []
        entries = dataset.ingest_catalog(path, skipped=skipped)
        assert [e.object_id for e in entries] == ["A-1", "D-4"]
        assert skipped == [2]

    def test_missing_column_is_fatal(self, tmp_path):
        path = tmp_path / "catalog.csv"
        cols = [c for c in dataset.CATALOG_COLUMNS if c != "e"]
        lines = [",".join(cols), "X-1,7000,50,10,20,30,2025-03-01T00:00:00"]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(ValueError, match="missing columns"):
            dataset.ingest_catalog(path)

    def test_empty_after_filter_is_fatal(self, tmp_path):
        path = tmp_path / "catalog.csv"
        write_catalog(path, [catalog_row("A-1", a_km=20000.0)])
        with pytest.raises(ValueError, match="no admissible"):
            dataset.ingest_catalog(path)

    def test_entry_unit_conversion(self):
        entry = dataset.CatalogEntry(
            object_id="X",
            a_km=7000.0,
            e=0.01,
            i_deg=90.0,
            raan_deg=180.0,
            argp_deg=0.0,
            m_deg=45.0,
            epoch_iso="2025-01-01T00:00:00",
        )
        oe = entry.to_classical()
        assert oe.a == pytest.approx(7.0e6)
        assert oe.i == pytest.approx(math.pi / 2.0)
        assert oe.raan == pytest.approx(math.pi)
        assert oe.mean_anomaly == pytest.approx(math.pi / 4.0)

    def two_cell_entries(self):
        dense = [catalog_row(f"D-{i:04d}", a_km=6700.0, e=0.05) for i in range(1000)]
        sparse = [catalog_row(f"S-{i:04d}", a_km=9500.0, e=0.25) for i in range(10)]
        return [
            dataset.CatalogEntry(
                object_id=r["object_id"],
                a_km=r["a_km"],
                e=r["e"],
                i_deg=r["i_deg"],
                raan_deg=r["raan_deg"],
                argp_deg=r["argp_deg"],
                m_deg=r["M_deg"],
                epoch_iso=r["epoch_iso"],
            )
            for r in dense + sparse
        ]

    def test_two_cell_weights_are_exact(self):
        entries = self.two_cell_entries()
        weights = dataset.catalog_weights(entries)
        dense_w = math.log1p(1000) / 1000
        sparse_w = math.log1p(10) / 10
        assert np.allclose(weights[:1000], dense_w)
        assert np.allclose(weights[1000:], sparse_w)

    def test_two_cell_draw_frequency_matches_log_ratio(self):
        entries = self.two_cell_entries()
        p_dense = math.log(1001) / (math.log(1001) + math.log(11))
        rng = np.random.default_rng(21)
        n_draws = 2000
        hits = 0
        for _ in range(n_draws):
            pick = dataset.sample_targets(entries, 1, rng)[0]
            hits += pick.object_id.startswith("D-")
        freq = hits / n_draws
        band = 3.0 * math.sqrt(p_dense * (1.0 - p_dense) / n_draws)
        assert abs(freq - p_dense) < band

    def test_sampling_is_permutation_invariant(self):
        entries = self.two_cell_entries()
        shuffled = list(entries)
        np.random.default_rng(0).shuffle(shuffled)
        picks_a = dataset.sample_targets(entries, 5, np.random.default_rng(9))
        picks_b = dataset.sample_targets(shuffled, 5, np.random.default_rng(9))
        assert [e.object_id for e in picks_a] == [e.object_id for e in picks_b]

    def test_sampling_without_replacement(self):
        entries = self.two_cell_entries()[:12]
        picks = dataset.sample_targets(entries, 12, np.random.default_rng(2))
        assert sorted(e.object_id for e in picks) == sorted(
            e.object_id for e in entries
        )
        with pytest.raises(ValueError):
            dataset.sample_targets(entries, 13, np.random.default_rng(2))


@pytest.fixture(scope="module")
def built_records(tmp_path_factory):
    scenarios = [
        dataclasses.replace(toy_scenario(), scenario_id=f"toy-{tag}")
        for tag in ("a", "b", "c")
    ]
    # A target far beyond the per-burn budget: its relaxation is infeasible
    # and the record must be dropped rather than written half-empty.
    doomed = dataclasses.replace(toy_scenario(u_max=1e-6), scenario_id="toy-doomed")
    seen: list[int] = []
    records = dataset.build_dataset(
        scenarios + [doomed], progress=lambda idx, rec: seen.append(idx)
    )
    return scenarios, records, seen


class TestPipeline:
    def test_failed_relaxations_are_dropped(self, built_records):
        scenarios, records, seen = built_records
        assert [r.scenario.scenario_id for r in records] == [
            sc.scenario_id for sc in scenarios
        ]
        assert seen == [0, 1, 2]

    def test_record_contents(self, built_records):
        _, records, _ = built_records
        for rec in records:
            assert rec.cvx.source == "CVX"
            assert rec.cvx_objective == pytest.approx(rec.cvx.cost, abs=1e-9)
            assert rec.scp_converged
            assert rec.scp_traj.source == "CVX_SCP"
            assert rec.scp_objective >= rec.cvx_objective - 1e-9
            assert rec.scp_c1 == 0
            assert rec.split in ("train", "val")
            assert rec.split == dataset.split_of(rec.scenario.scenario_id)

    def test_jsonl_roundtrip_is_bit_identical(self, built_records, tmp_path):
        _, records, _ = built_records
        path_a = tmp_path / "records.jsonl"
        dataset.save_records(records, path_a)
        loaded = dataset.load_records(path_a)
        assert [r.to_dict() for r in loaded] == [r.to_dict() for r in records]
        path_b = tmp_path / "records2.jsonl"
        dataset.save_records(loaded, path_b)
        assert path_a.read_bytes() == path_b.read_bytes()

    def test_split_filters_partition_converged_records(self, built_records):
        _, records, _ = built_records
        train = dataset.training_records(records)
        val = dataset.validation_records(records)
        converged = [r for r in records if r.scp_converged]
        assert len(train) + len(val) == len(converged)
        for rec in train:
            assert rec.split == "train"
        for rec in val:
            assert rec.split == "val"

    def test_failed_refinement_record_roundtrips(self):
        sc = toy_scenario()
        controls = np.zeros((sc.n_steps, 3))
        traj = ocp.Trajectory(
            states=np.zeros((sc.n_steps, 6)),
            controls=controls,
            scenario_id=sc.scenario_id,
            source="CVX",
        )
        rec = dataset.DatasetRecord(
            scenario=sc,
            cvx=traj,
            cvx_objective=0.0,
            cvx_c1=3,
            scp_traj=None,
            scp_objective=None,
            scp_converged=False,
            scp_iterations=50,
            scp_c1=None,
            split="train",
        )
        back = dataset.record_from_dict(rec.to_dict())
        assert back.to_dict() == rec.to_dict()
        assert back.scp_traj is None
        assert back.scp_objective is None
