from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from mobichain import transfer
from mobichain.checkpoint import load_checkpoint
from mobichain.encoding import SlotDataset, encode_chains
from mobichain.errors import EmptyDatasetError, InvalidConfigError, NoTargetDataError
from mobichain.loss import LossConfig
from mobichain.model import init_model
from mobichain.simgen import DegradationConfig, degrade_population
from mobichain.transfer import (
    TransferConfig,
    retain,
    run_transfer_loop,
    synthesize_dataset,
    transfer_iteration,
    unfreeze_schedule,
)

_SMALL = dict(max_iterations=2, epochs_per_iteration=2, batch_size=8, seed=4)


@pytest.fixture
def base(tiny_config):
    return init_model(tiny_config)


@pytest.fixture(scope="module")
def target_chains(region_b_days):
    return degrade_population(region_b_days, DegradationConfig(coverage_mean=0.6, seed=5))


def _same_params(a, b, prefix=""):
    return all(np.array_equal(a[name].data, b[name].data) for name in a.tensors if name.startswith(prefix))


def test_unfreeze_schedule():
    stages = [unfreeze_schedule(epoch, 8) for epoch in range(8)]
    assert stages[0] == stages[1] == {"embeddings", "mlp_head"}
    assert stages[2] == stages[3] == {"embeddings", "mlp_head", "block_1"}
    assert all(s == {"embeddings", "mlp_head", "block_1", "block_2"} for s in stages[4:])
    assert not any("block_3" in s for s in stages)
    with pytest.raises(ValueError):
        unfreeze_schedule(8, 8)


def test_transfer_config_rejects():
    with pytest.raises(InvalidConfigError):
        TransferConfig(unfreeze_fractions=(0.5, 0.5, 0.5))
    with pytest.raises(InvalidConfigError):
        TransferConfig(retention_fraction=1.0)
    with pytest.raises(InvalidConfigError):
        TransferConfig(max_iterations=0)


def test_retain(complete_dataset):
    pool = complete_dataset.subset(range(10))
    kept = retain(pool, 0.2, np.random.default_rng(0))
    assert len(kept) == 2
    assert len(retain(pool, 0.0, np.random.default_rng(0))) == 0
    assert len(retain(SlotDataset.empty(), 0.2, np.random.default_rng(0))) == 0


def test_synthesized_days_keep_observations(base, target_chains):
    target = encode_chains(target_chains[:6])
    synthetic = synthesize_dataset(base, target, np.random.default_rng(0))
    assert synthetic.is_complete
    assert np.array_equal(synthetic.real, target.observed)
    assert np.array_equal(synthetic.tokens[target.observed], target.tokens[target.observed])


def test_iteration_never_touches_last_block(base, complete_dataset):
    synthetic = complete_dataset.subset(range(8))
    synthetic.real = np.zeros_like(synthetic.observed)
    synthetic.real[:, :48] = True
    cfg = TransferConfig(**{**_SMALL, "epochs_per_iteration": 4})
    tuned, train = transfer_iteration(base, synthetic, complete_dataset.subset(range(8, 12)), cfg, LossConfig(),
                                      np.random.default_rng(1))
    assert len(train) == 12
    assert _same_params(tuned, base, "block_3")
    assert not _same_params(tuned, base, "block_2")
    assert not _same_params(tuned, base, "mlp_head")
    assert train.real[8:].all()


def test_iteration_with_zero_loss_changes_nothing(base, complete_dataset):
    synthetic = complete_dataset.subset(range(8))
    synthetic.real = np.zeros_like(synthetic.observed)
    cfg = TransferConfig(**{**_SMALL, "l2": 0.0})
    tuned, _ = transfer_iteration(base, synthetic, SlotDataset.empty(), cfg, LossConfig(w_s=0.0, w2=0.0, w3=0.0),
                                  np.random.default_rng(2))
    assert _same_params(tuned, base)


def test_iteration_needs_synthetic_data(base):
    with pytest.raises(EmptyDatasetError):
        transfer_iteration(base, SlotDataset.empty(), SlotDataset.empty(), TransferConfig(), LossConfig(),
                           np.random.default_rng(0))


def test_transfer_loop(tmp_path, base, target_chains, complete_dataset):
    original = base.copy()
    cfg = TransferConfig(**_SMALL)
    best, state = run_transfer_loop(base, target_chains, cfg, source=complete_dataset, out_dir=tmp_path)

    assert state.iteration == 2
    assert len(state.trajectory) == 2
    assert state.baseline is not None
    assert state.best_iteration in (1, 2)
    assert state.best_report.mean == min(r.mean for r in state.trajectory)
    assert _same_params(base, original)

    assert (tmp_path / "iter_01" / "model.ckpt").exists()
    assert (tmp_path / "iter_02" / "synthetic.jsonl").exists()
    stored, extra = load_checkpoint(tmp_path / "best.ckpt")
    assert extra == {"iteration": state.best_iteration}
    assert _same_params(stored, best)

    frame = pd.read_csv(tmp_path / "trajectory.csv")
    assert list(frame.columns) == ["iteration", "jsd_length", "jsd_type", "jsd_start", "jsd_end", "jsd_duration", "mean"]
    assert list(frame["iteration"]) == [1, 2]
    assert json.loads((tmp_path / "state.json").read_text())["iteration"] == 2


def test_resume_matches_uninterrupted_run(tmp_path, monkeypatch, base, target_chains):
    cfg = TransferConfig(**_SMALL)
    _, straight = run_transfer_loop(base, target_chains, cfg, out_dir=tmp_path / "straight")

    real_iteration = transfer.transfer_iteration
    calls = []

    def crash_on_second(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise RuntimeError("interrupted")
        return real_iteration(*args, **kwargs)

    monkeypatch.setattr(transfer, "transfer_iteration", crash_on_second)
    with pytest.raises(RuntimeError, match="interrupted"):
        run_transfer_loop(base, target_chains, cfg, out_dir=tmp_path / "resumed")
    monkeypatch.setattr(transfer, "transfer_iteration", real_iteration)

    _, resumed = run_transfer_loop(base, target_chains, cfg, out_dir=tmp_path / "resumed", resume=True)
    assert resumed.iteration == 2
    assert [r.values for r in resumed.trajectory] == [r.values for r in straight.trajectory]
    assert resumed.best_iteration == straight.best_iteration

    with pytest.raises(InvalidConfigError):
        run_transfer_loop(base, target_chains, TransferConfig(**{**_SMALL, "lr": 1e-2}),
                          out_dir=tmp_path / "resumed", resume=True)


def test_loop_stops_on_convergence(base, target_chains):
    cfg = TransferConfig(**{**_SMALL, "max_iterations": 3, "convergence_epsilon": 1.0})
    _, state = run_transfer_loop(base, target_chains, cfg)
    assert state.converged
    assert state.iteration == 2


def test_loop_needs_target_data(base):
    with pytest.raises(NoTargetDataError):
        run_transfer_loop(base, [], TransferConfig())
