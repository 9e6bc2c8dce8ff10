"""
Acceptance tests for DESP (BDD style).
End-to-end training runs on the three tasks; they take minutes per seed, so
they only run with DESP_RUN_ACCEPTANCE=1.
"""
import os
import sys
from functools import lru_cache

import numpy as np
import pytest
from scipy import stats
from scipy.cluster.hierarchy import fcluster, linkage

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '../..'))

from lib.checkpoint import Checkpoint
from lib.config import AdamConfig, BaselineConfig, SamplerConfig, TrainConfig
from lib.datasets import encode_inputs, generate, task_info
from lib.evaluation import ablate_st, evaluate, multimodal_report, raw_predictions
from lib.langevin import init_chain, sample_negative
from lib.set_networks import PaddedSetBatch, default_dims, energy_of
from lib.training import (
    init_energy_model,
    train,
    train_baseline,
    train_outlier_baseline,
    training_sampler,
    validation_energies,
)

pytestmark = [
    pytest.mark.acceptance,
    pytest.mark.skipif(os.getenv("DESP_RUN_ACCEPTANCE") != "1", reason="set DESP_RUN_ACCEPTANCE=1 to run"),
]

SEEDS = range(5)
TRAIN_COUNT = 8000
EVAL_COUNT = 1000
POLYGON_SIZES = [3, 4, 5, 6]
ENERGY_TRAIN = dict(epochs=10, batch_size=32, log_wall_time=False, checkpoint_every=0,
                    adam=AdamConfig(lr=1e-3), sampler=SamplerConfig())
BASELINE_TRAIN = dict(epochs=30, batch_size=32, adam=AdamConfig(lr=1e-3))


def _data(task, seed, held_out, **kwargs):
    count = EVAL_COUNT if held_out else TRAIN_COUNT
    return generate(task, count, 1000 * seed + int(held_out), **kwargs)


def _energy(task, seed, metrics_path=None):
    info = task_info(task)
    config = TrainConfig(seed=seed, **ENERGY_TRAIN)
    sizes = {"sizes": POLYGON_SIZES} if task == "polygons" else {}
    model = init_energy_model(info, default_dims(info), config)
    result = train(model, _data(task, seed, False, **sizes), config, info=info,
                   metrics_path=metrics_path, progress=False)
    return Checkpoint(result.model.kind, result.model)


def _baseline(task, seed, loss_kind):
    sizes = {"sizes": POLYGON_SIZES} if task == "polygons" else {}
    config = BaselineConfig(seed=seed, **BASELINE_TRAIN)
    fit = train_baseline(loss_kind, _data(task, seed, False, **sizes), config, progress=False)
    return Checkpoint("Baseline", fit.model)


@lru_cache(maxsize=None)
def _table_run(task, seed):
    sizes = {"sizes": POLYGON_SIZES} if task == "polygons" else {}
    test = _data(task, seed, True, **sizes)
    energy = _energy(task, seed)
    chamfer_ckpt = _baseline(task, seed, "chamfer")
    return {
        "desp": evaluate(energy, test, seed=seed),
        "chamfer": evaluate(chamfer_ckpt, test, seed=seed),
        "hungarian": evaluate(_baseline(task, seed, "hungarian"), test, seed=seed),
        "ckpt": energy,
        "chamfer_ckpt": chamfer_ckpt,
        "test": test,
    }


def _distinct_vertices(points, tol=0.1):
    if len(points) < 2:
        return len(points)
    return int(fcluster(linkage(points, "single"), t=tol, criterion="distance").max())


class TestSetLossOrderings:
    """Energy-based prediction against direct risk minimization."""

    def test_polygons_hungarian_ordering(self):
        """
        Given: DESP, a Chamfer-trained and a Hungarian-trained decoder on Polygons (n in 3..6)
        When: each is scored with the Hungarian loss on held-out polygons
        Then: DESP <= Hungarian baseline < Chamfer baseline / 2 on at least 4 of 5 seeds
        """
        held = 0
        for seed in SEEDS:
            run = _table_run("polygons", seed)
            desp, hung, cham = run["desp"].hungarian, run["hungarian"].hungarian, run["chamfer"].hungarian
            held += desp <= hung and 2 * hung <= cham
        assert held >= 4

    def test_digits_chamfer_ordering(self):
        """
        Given: the same three models trained on Digits
        When: each is scored with both set losses
        Then: DESP is at least as good as the best baseline under Chamfer, and each
              baseline loses on the metric it was not trained for, on at least 4 of 5 seeds
        """
        held = 0
        for seed in SEEDS:
            run = _table_run("digits", seed)
            desp, cham, hung = run["desp"], run["chamfer"], run["hungarian"]
            held += (desp.chamfer <= min(cham.chamfer, hung.chamfer)
                     and hung.chamfer > cham.chamfer and cham.hungarian > hung.hungarian)
        assert held >= 4


class TestSamplerSchedule:
    """Noisy-step fraction during prediction."""

    def test_energy_and_loss_track_each_other(self):
        """
        Given: a trained Polygons energy model
        When: predictions are made with S/T in {0, 0.2, ..., 1.0} over 5 seeds
        Then: mean energy at S/T = 0.8 is no higher than at S/T = 0, and mean energy
              correlates positively (r > 0.5) with the Hungarian loss across ratios
        """
        run = _table_run("polygons", 0)
        ratios = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
        rows = ablate_st(run["ckpt"], run["test"][:200], ratios, seeds=list(SEEDS))
        energy = {r["ratio"]: r["mean_energy"] for r in rows}
        assert energy[0.8] <= energy[0.0]
        r, _ = stats.pearsonr([row["mean_energy"] for row in rows], [row["hungarian"] for row in rows])
        assert r > 0.5


class TestMultiModality:
    """Several plausible sets per input."""

    def test_polygon_rotations_spread(self):
        """
        Given: a trained Polygons energy model
        When: 16 seeded predictions are made for one pentagon input
        Then: the circular std of their rotations exceeds 0.2 rad on at least 4 of 5 seeds
        """
        ckpt = _table_run("polygons", 0)["ckpt"]
        spread = [multimodal_report(ckpt.model, "polygons", n=5, k=16, seed=s)["inputs"]["5"]["circular_std"]
                  for s in SEEDS]
        assert sum(1 for v in spread if v is not None and v > 0.2) >= 4

    def test_digit_styles_both_appear(self):
        """
        Given: a trained Digits energy model
        When: 16 seeded predictions are made per digit
        Then: both writing styles appear for every digit on at least 4 of 5 seeds
        """
        ckpt = _table_run("digits", 0)["ckpt"]
        held = 0
        for seed in SEEDS:
            report = multimodal_report(ckpt.model, "digits", k=16, seed=seed)
            held += all(min(entry["styles"].values()) > 0 for entry in report["inputs"].values())
        assert held >= 4


class TestSubsetAnomaly:
    """Ambiguous outlier detection."""

    def test_desp_beats_per_element_classifier(self):
        """
        Given: DESP and a per-element sigmoid classifier trained on the anomaly task
        When: both are scored on ambiguous held-out sets
        Then: DESP's frequency-weighted F1 is higher by at least 0.05
        """
        train_set = generate("anomaly", 4000, 7)
        test = generate("anomaly", 500, 8)
        info = task_info("anomaly")
        config = TrainConfig(seed=0, **ENERGY_TRAIN)
        model = init_energy_model(info, default_dims(info), config)
        energy = train(model, train_set, config, info=info, progress=False).model
        outlier = train_outlier_baseline(train_set, BaselineConfig(**BASELINE_TRAIN), progress=False).model

        desp = evaluate(Checkpoint(energy.kind, energy), test, split="ambiguous")
        base = evaluate(Checkpoint("OutlierBaseline", outlier), test, split="ambiguous")
        assert desp.f1 >= base.f1 + 0.05


class TestDeterminism:
    """Fixed seeds reproduce runs."""

    def test_training_metrics_reproduce(self, tmp_path):
        """
        Given: the Polygons training configuration with a fixed seed
        When: training runs twice
        Then: the two metrics CSV files are byte-identical
        """
        _energy("polygons", 3, tmp_path / "a.csv")
        _energy("polygons", 3, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestTrainedEnergy:
    """What contrastive training leaves in the energy landscape."""

    def test_held_out_energy_separation(self):
        """
        Given: a Polygons energy model after training
        When: held-out targets and fresh negatives are scored
        Then: mean E⁺ is below mean E⁻
        """
        run = _table_run("polygons", 0)
        config = TrainConfig(seed=0, **ENERGY_TRAIN)
        e_pos, e_neg = validation_energies(run["ckpt"].model, run["test"][:200], task_info("polygons"),
                                           config, ENERGY_TRAIN["epochs"])
        assert e_pos < e_neg

    def test_negative_sampling_descends(self):
        """
        Given: a trained Polygons energy model and 100 seeded chains
        When: each chain runs the training sampler from its Gaussian start
        Then: the final set has lower energy than its own start in at least 90% of chains
        """
        run = _table_run("polygons", 0)
        model, info = run["ckpt"].model, task_info("polygons")
        test = run["test"][:100]
        x = encode_inputs(test, info)
        sampler = training_sampler(TrainConfig(seed=0, **ENERGY_TRAIN), model.kind)
        shape = (info.max_size, info.element_dim)
        keys = [(i,) for i in range(len(test))]
        start = init_chain(sampler, shape, keys).y
        end = sample_negative(model, x, sampler, shape=shape, chain_keys=keys)
        assert np.mean(energy_of(model, x, end) < energy_of(model, x, start)) >= 0.9


class TestChamferCollapse:
    """Direct Chamfer training on Polygons."""

    def test_vertices_merge(self):
        """
        Given: the Chamfer-trained decoder on Polygons
        When: it predicts held-out polygons
        Then: some prediction has fewer distinct vertices than the polygon it was asked for
        """
        run = _table_run("polygons", 0)
        info = task_info("polygons")
        test = run["test"][:200]
        values = raw_predictions(run["chamfer_ckpt"].model, info, test, range(len(test)), SamplerConfig())
        sets = PaddedSetBatch.from_prediction(values).sets()
        assert any(_distinct_vertices(s) < len(e.target) for s, e in zip(sets, test))
