import math
import os

import numpy as np
import pytest
import torch

from flowgen.blobio import sha256_arrays
from flowgen.data import make_synthetic
from flowgen.denoiser import VolumeEstimator
from flowgen.diffusion import make_linear_schedule
from flowgen.kge import region_embedding_matrix
from flowgen.trainer import (PredictionTrainer, TrainConfig, TrainedModel,
                             Trainer, TrainerError, TrainingDivergedError,
                             generate_for_regions, predict_future,
                             pretrain_volume, train_predictive,
                             write_train_log)
from flowgen.ukg import extract_region_subgraph


@pytest.fixture(scope="module")
def short_schedule():
    return make_linear_schedule(40, 1e-3, 0.25)


@pytest.fixture(scope="module")
def wired(small_setup):
    dataset, kg, embs = small_setup
    subgraph = extract_region_subgraph(kg, dataset.train_ids)
    return dataset, kg, embs, subgraph


def tiny_config(**kw):
    base = dict(epochs=4, m1=3, m2=2, lr=1e-3, batch_size=4, seed=0,
                d_h=16, num_layers=2, heads=2, step_mlp_dim=32, vol_hidden=8,
                threads=1)
    base.update(kw)
    return TrainConfig(**base)


class TestPretrainVolume:
    def test_zero_epochs_unchanged(self):
        torch.manual_seed(0)
        est = VolumeEstimator(2, 1)
        before = {k: v.clone() for k, v in est.state_dict().items()}
        log = pretrain_volume(est, torch.randn(3, 2), torch.randn(2, 3, 4, 1), 0, 1e-2)
        assert log == []
        for k, v in est.state_dict().items():
            assert torch.equal(before[k], v)

    def test_constant_flow_converges(self):
        torch.manual_seed(0)
        est = VolumeEstimator(1, 1)  # default width carries the linear capacity
        conditions = torch.tensor([[1.0]])
        flow = torch.full((3, 1, 4, 1), 5.0)
        pretrain_volume(est, conditions, flow, m1=100, lr=1e-2)
        assert est(conditions).item() == pytest.approx(5.0, rel=0.01)

    def test_loss_non_increasing_endpoints(self, wired):
        dataset, _, _, _ = wired
        torch.manual_seed(1)
        est = VolumeEstimator(dataset.conditions.shape[1], dataset.channels)
        conditions = torch.as_tensor(dataset.conditions_for(dataset.train_ids),
                                     dtype=torch.float32)
        flow = torch.as_tensor(dataset.normalized_flow(dataset.train_ids))
        log = pretrain_volume(est, conditions, flow, m1=50, lr=1e-2)
        assert log[-1].loss <= log[0].loss

    def test_empty_flow_rejected(self):
        est = VolumeEstimator(1, 1)
        with pytest.raises(TrainerError):
            pretrain_volume(est, torch.zeros(1, 1), torch.zeros(0, 1, 4, 1), 5, 1e-2)


class TestTrainerPhases:
    def test_zero_epochs_returns_initial_params(self, wired, short_schedule):
        dataset, _, embs, subgraph = wired
        config = tiny_config(epochs=0, m1=0)
        model, log = Trainer(dataset, embs, subgraph, short_schedule, config).run()
        fresh = Trainer(dataset, embs, subgraph, short_schedule, config)
        assert sha256_arrays(model.state_arrays()) == \
            sha256_arrays(fresh.model().state_arrays())
        assert log == []

    def test_phase_sequence(self, wired, short_schedule):
        dataset, _, embs, subgraph = wired
        _, log = Trainer(dataset, embs, subgraph, short_schedule,
                         tiny_config(epochs=4, m1=3, m2=2)).run()
        phases = [e.phase for e in log]
        assert phases == ["pretrain"] * 3 + ["diffusion", "diffusion", "volume",
                                             "diffusion", "diffusion", "volume"]
        epochs = [e.epoch for e in log if e.phase == "diffusion"]
        assert epochs == [1, 2, 3, 4]

    def test_frozen_sentinel_skips_volume_phases(self, wired, short_schedule):
        dataset, _, embs, subgraph = wired
        trainer = Trainer(dataset, embs, subgraph, short_schedule,
                          tiny_config(m2="w/o"))
        model, log = trainer.run()
        assert not any(e.phase == "volume" for e in log)
        # estimator untouched after pretraining: retrain the pretrain phase alone
        ref = Trainer(dataset, embs, subgraph, short_schedule,
                      tiny_config(epochs=0, m2="w/o"))
        ref.pretrain()
        for k, v in ref.estimator.state_dict().items():
            assert torch.equal(v, trainer.estimator.state_dict()[k])

    def test_l1_updates_both_theta_and_phi(self, wired, short_schedule):
        dataset, _, embs, subgraph = wired
        trainer = Trainer(dataset, embs, subgraph, short_schedule, tiny_config())
        trainer.pretrain()
        phi_before = {k: v.clone() for k, v in trainer.estimator.state_dict().items()}
        theta_before = {k: v.clone() for k, v in trainer.denoiser.state_dict().items()}
        trainer.diffusion_epoch()
        assert any(not torch.equal(phi_before[k], v)
                   for k, v in trainer.estimator.state_dict().items())
        assert any(not torch.equal(theta_before[k], v)
                   for k, v in trainer.denoiser.state_dict().items())
        grad_norm = sum(float(p.grad.abs().sum())
                        for p in trainer.estimator.parameters()
                        if p.grad is not None)
        assert grad_norm > 0

    def test_volume_phase_leaves_theta_untouched(self, wired, short_schedule):
        dataset, _, embs, subgraph = wired
        trainer = Trainer(dataset, embs, subgraph, short_schedule, tiny_config())
        trainer.pretrain()
        trainer.diffusion_epoch()
        theta = {k: v.clone() for k, v in trainer.denoiser.state_dict().items()}
        phi = {k: v.clone() for k, v in trainer.estimator.state_dict().items()}
        trainer.volume_update()
        for k, v in trainer.denoiser.state_dict().items():
            assert torch.equal(theta[k], v)
        assert any(not torch.equal(phi[k], v)
                   for k, v in trainer.estimator.state_dict().items())

    def test_seeded_run_bitwise_reproducible(self, wired, short_schedule):
        dataset, _, embs, subgraph = wired
        a, _ = Trainer(dataset, embs, subgraph, short_schedule, tiny_config()).run()
        b, _ = Trainer(dataset, embs, subgraph, short_schedule, tiny_config()).run()
        assert sha256_arrays(a.state_arrays()) == sha256_arrays(b.state_arrays())

    def test_subgraph_order_mismatch_rejected(self, wired, short_schedule):
        dataset, kg, embs, _ = wired
        wrong = extract_region_subgraph(kg, list(reversed(dataset.train_ids)))
        with pytest.raises(TrainerError):
            Trainer(dataset, embs, wrong, short_schedule, tiny_config())

    def test_nonfinite_loss_aborts_with_checkpoint(self, wired, short_schedule,
                                                   tmp_path):
        dataset, _, embs, subgraph = wired
        trainer = Trainer(dataset, embs, subgraph, short_schedule,
                          tiny_config(epochs=2, m1=0))
        with torch.no_grad():
            trainer.denoiser.head2.weight.fill_(1e38)
            trainer.denoiser.head2.bias.fill_(1e38)
        with pytest.raises(TrainingDivergedError):
            trainer.run(run_dir=tmp_path)
        assert (tmp_path / "checkpoint.bin").exists()


class TestCheckpointAndGeneration:
    @pytest.fixture(scope="class")
    def trained(self, wired, short_schedule):
        dataset, kg, embs, subgraph = wired
        model, _ = Trainer(dataset, embs, subgraph, short_schedule,
                           tiny_config(epochs=6)).run()
        test_subgraph = extract_region_subgraph(kg, dataset.test_ids)
        return dataset, embs, model, test_subgraph

    def test_generation_deterministic(self, trained):
        dataset, embs, model, sub = trained
        conditions = dataset.conditions_for(dataset.test_ids)
        a = generate_for_regions(model, conditions, embs, sub, 2, seed=9)
        b = generate_for_regions(model, conditions, embs, sub, 2, seed=9)
        assert np.array_equal(a, b)
        assert a.shape == (2, len(dataset.test_ids), dataset.horizon,
                           dataset.channels)
        assert a.min() >= 0.0

    def test_guide_matches_estimator_exactly(self, trained):
        dataset, embs, model, sub = trained
        conditions = dataset.conditions_for(dataset.test_ids)
        with torch.no_grad():
            expected = model.estimator(
                torch.as_tensor(conditions, dtype=torch.float32)).numpy()
        # the guide used by generation is exactly the estimator output
        from flowgen.denoiser import expand_volume

        guide = expand_volume(torch.as_tensor(expected), dataset.horizon)
        assert np.array_equal(guide.numpy()[:, 0, :], expected)

    def test_checkpoint_roundtrip_identical_generation(self, trained, tmp_path):
        dataset, embs, model, sub = trained
        path = tmp_path / "checkpoint.bin"
        model.save(path)
        loaded = TrainedModel.load(path)
        conditions = dataset.conditions_for(dataset.test_ids)
        a = generate_for_regions(model, conditions, embs, sub, 2, seed=3)
        b = generate_for_regions(loaded, conditions, embs, sub, 2, seed=3)
        assert np.array_equal(a, b)

    def test_checkpoint_bytes_deterministic(self, trained, tmp_path):
        _, _, model, _ = trained
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        model.save(p1)
        model.save(p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_feature_dim_mismatch_rejected(self, trained):
        dataset, embs, model, sub = trained
        bad = np.zeros((len(dataset.test_ids), 99), dtype=np.float32)
        with pytest.raises(TrainerError, match="d_fea"):
            generate_for_regions(model, bad, embs, sub, 1)

    def test_embedding_matrix_direct_input(self, trained):
        dataset, embs, model, sub = trained
        conditions = dataset.conditions_for(dataset.test_ids)
        matrix = region_embedding_matrix(embs, dataset.test_ids)
        a = generate_for_regions(model, conditions, embs, sub, 1, seed=1)
        b = generate_for_regions(model, conditions, matrix, sub, 1, seed=1)
        assert np.array_equal(a, b)


class TestPredictionMode:
    @pytest.fixture(scope="class")
    def windows(self, small_city):
        raw = small_city.windows(t_in=6, t_out=6, stride=12)
        mean = raw.mean()
        std = raw.std() + 1e-8
        return ((raw - mean) / std).astype(np.float32)

    def test_window_length_mismatch_rejected(self, wired, short_schedule, windows):
        dataset, kg, embs, _ = wired
        sub = extract_region_subgraph(kg, dataset.region_ids)
        with pytest.raises(TrainerError):
            PredictionTrainer(windows, embs, sub, short_schedule,
                              tiny_config(), t_in=6, t_out=7)

    def test_mask_zeroes_future_only(self, wired, short_schedule, windows):
        dataset, kg, embs, _ = wired
        sub = extract_region_subgraph(kg, dataset.region_ids)
        trainer = PredictionTrainer(windows, embs, sub, short_schedule,
                                    tiny_config(), t_in=6, t_out=6)
        masked = trainer.masked(trainer.windows[:2])
        assert torch.equal(masked[..., 6:, :], torch.zeros_like(masked[..., 6:, :]))
        assert torch.equal(masked[..., :6, :], trainer.windows[:2][..., :6, :])

    def test_no_estimator_and_zero_guide(self, wired, short_schedule, windows):
        dataset, kg, embs, _ = wired
        sub = extract_region_subgraph(kg, dataset.region_ids)
        model, log = train_predictive(windows[:4], embs, sub, short_schedule,
                                      tiny_config(epochs=2, m1=0), t_in=6, t_out=6)
        assert model.estimator is None
        assert model.manifest["use_guide"] is False
        assert all(e.phase == "diffusion" for e in log)

    def test_forecast_shape_and_determinism(self, wired, short_schedule, windows):
        dataset, kg, embs, _ = wired
        sub = extract_region_subgraph(kg, dataset.region_ids)
        model, _ = train_predictive(windows[:4], embs, sub, short_schedule,
                                    tiny_config(epochs=2, m1=0), t_in=6, t_out=6)
        history = windows[-1][:, :6]
        a = predict_future(model, history, embs, sub, num_samples=3, seed=4)
        b = predict_future(model, history, embs, sub, num_samples=3, seed=4)
        assert a.shape == (dataset.num_regions, 6, dataset.channels)
        assert np.array_equal(a, b)

    def test_generation_checkpoint_refused(self, wired, short_schedule, windows):
        dataset, kg, embs, _ = wired
        sub = extract_region_subgraph(kg, dataset.train_ids)
        model, _ = Trainer(dataset, embs, sub, short_schedule,
                           tiny_config(epochs=1)).run()
        with pytest.raises(TrainerError):
            predict_future(model, windows[-1][:, :6], embs, sub)


class TestTrainLog:
    def test_csv_layout(self, tmp_path, wired, short_schedule):
        dataset, _, embs, subgraph = wired
        _, log = Trainer(dataset, embs, subgraph, short_schedule,
                         tiny_config(epochs=2, m1=1, m2=2)).run()
        path = tmp_path / "train_log.csv"
        write_train_log(path, log)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,phase,loss,seconds"
        assert len(lines) == 1 + len(log)
