"""Unit tests for client module."""

from collections import Counter

import numpy as np
import pytest

from src.client import (
    ClientConfig,
    ClientError,
    ClientState,
    DivergenceError,
    draw_local_epochs,
    local_train,
)
from src.data import LabeledDataset, generate_blobs, make_client
from src.model import Arch, ModelSpec, init_params, zeros
from src.strategies import LossStrategy, StrategyContext, StrategyKind, loss_and_grad

SPEC = ModelSpec(Arch.SOFTMAX_LINEAR, input_dim=3, num_classes=4)


def blob_client(client_id=0, samples_per_class=10, seed=0):
    return make_client(client_id, generate_blobs(4, 3, samples_per_class, 0.2, seed=seed))


class TestClientConfig:
    """Test local training settings."""

    def test_defaults(self):
        """Test the default values."""
        cfg = ClientConfig()
        assert cfg.batch_size == 32
        assert cfg.epoch_range == (1, 5)
        assert cfg.strategy.kind is StrategyKind.FEDAVG

    def test_invalid(self):
        """Test batch size, learning rate and epoch range checks."""
        with pytest.raises(ClientError):
            ClientConfig(batch_size=0)
        with pytest.raises(ClientError):
            ClientConfig(local_lr=-0.1)
        with pytest.raises(ClientError):
            ClientConfig(epoch_range=(3, 2))
        with pytest.raises(ClientError):
            ClientConfig(epoch_range=(0, 2))


class TestDrawLocalEpochs:
    """Test per-round epoch budgets."""

    def test_fixed_range(self):
        """Test that lo == hi always yields lo."""
        cfg = ClientConfig(epoch_range=(3, 3))
        assert {draw_local_epochs(cfg, r, 0, base_seed=1) for r in range(20)} == {3}

    def test_deterministic(self):
        """Test keying by (seed, round, client)."""
        cfg = ClientConfig(epoch_range=(1, 5))
        assert draw_local_epochs(cfg, 4, 2, 9) == draw_local_epochs(cfg, 4, 2, 9)

    def test_uniform_frequencies(self):
        """Test that each epoch count appears with frequency 1/5 within 5%."""
        cfg = ClientConfig(epoch_range=(1, 5))
        counts = Counter(draw_local_epochs(cfg, r, c, 123) for r in range(500) for c in range(100))
        assert set(counts) == {1, 2, 3, 4, 5}
        for value in range(1, 6):
            assert counts[value] / 50_000 == pytest.approx(0.2, rel=0.05)


class TestLocalTrain:
    """Test local SGD."""

    def setup_method(self):
        self.client = blob_client()
        self.global_params = init_params(SPEC, seed=1)
        self.state = ClientState(client_id=0, rng_seed=77)

    def test_zero_learning_rate_keeps_global(self):
        """Test that local_lr = 0 returns the broadcast model."""
        cfg = ClientConfig(batch_size=4, local_lr=0.0, epoch_range=(1, 1))
        update, _ = local_train(self.global_params, self.client, self.state, cfg, epochs=3)
        assert update.params == self.global_params

    def test_single_full_batch_is_one_gradient_step(self):
        """Test one epoch with a batch covering the client data."""
        cfg = ClientConfig(batch_size=1000, local_lr=0.3)
        update, _ = local_train(self.global_params, self.client, self.state, cfg, epochs=1)
        _, grad = loss_and_grad(SPEC, LossStrategy(), self.global_params, self.client.data, StrategyContext())
        expected = self.global_params.values - 0.3 * grad.values
        np.testing.assert_allclose(update.params.values, expected, rtol=0, atol=1e-12)

    def test_update_fields(self):
        """Test sample count, epochs and per-epoch losses."""
        cfg = ClientConfig(batch_size=8, local_lr=0.1)
        update, _ = local_train(self.global_params, self.client, self.state, cfg, epochs=4)
        assert update.client_id == 0
        assert update.num_samples == 40
        assert update.epochs_used == 4
        assert len(update.epoch_losses) == 4
        assert update.final_local_loss == update.epoch_losses[-1]

    def test_training_reduces_loss(self):
        """Test that several epochs on separable data lower the local loss."""
        cfg = ClientConfig(batch_size=8, local_lr=0.5)
        update, _ = local_train(self.global_params, self.client, self.state, cfg, epochs=10)
        assert update.epoch_losses[-1] < update.epoch_losses[0]

    def test_deterministic(self):
        """Test that identical inputs give identical updates."""
        cfg = ClientConfig(batch_size=8, local_lr=0.1)
        a, state_a = local_train(self.global_params, self.client, self.state, cfg, epochs=2)
        b, state_b = local_train(self.global_params, self.client, self.state, cfg, epochs=2)
        assert a == b
        assert state_a == state_b

    def test_state_advances(self):
        """Test the new seed and the stored previous local model."""
        cfg = ClientConfig(batch_size=8, local_lr=0.1)
        update, state = local_train(self.global_params, self.client, self.state, cfg, epochs=1)
        assert state.client_id == 0
        assert state.rng_seed != self.state.rng_seed
        assert state.prev_local_params == update.params

    def test_moon_bootstraps_with_zero_model(self):
        """Test that a missing previous model acts as the zero vector."""
        cfg = ClientConfig(batch_size=8, local_lr=0.1, strategy=LossStrategy(StrategyKind.MOON))
        spec = ModelSpec(Arch.MLP1, input_dim=3, num_classes=4, hidden_dim=5)
        start = init_params(spec, seed=2)
        fresh, _ = local_train(start, self.client, self.state, cfg, epochs=2)
        explicit = ClientState(client_id=0, rng_seed=77, prev_local_params=zeros(spec))
        seeded, _ = local_train(start, self.client, explicit, cfg, epochs=2)
        assert fresh.params == seeded.params

    def test_invalid_epochs_and_empty_client(self):
        """Test epochs < 1 and a client without samples."""
        cfg = ClientConfig()
        with pytest.raises(ClientError):
            local_train(self.global_params, self.client, self.state, cfg, epochs=0)
        empty = make_client(3, LabeledDataset(np.zeros((0, 3)), [], 4))
        with pytest.raises(ClientError):
            local_train(self.global_params, empty, self.state, cfg, epochs=1)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        """Test that an exploding step raises DivergenceError with round and client."""
        huge = make_client(5, LabeledDataset(np.full((4, 3), 1e10), [0, 1, 2, 3], 4))
        cfg = ClientConfig(batch_size=2, local_lr=1e308)
        with pytest.raises(DivergenceError) as info:
            local_train(self.global_params, huge, ClientState(5, 1), cfg, epochs=3, round_index=7)
        assert info.value.client_id == 5
        assert info.value.round == 7

    @pytest.mark.parametrize("seed", range(20))
    def test_full_batch_loss_never_increases(self, seed):
        """Test that small full-batch steps lower the client loss every epoch."""
        client = blob_client(samples_per_class=6, seed=seed)
        start = init_params(SPEC, seed=seed)
        cfg = ClientConfig(batch_size=64, local_lr=1e-3)
        update, _ = local_train(start, client, ClientState(0, seed), cfg, epochs=5)
        final_loss, _ = loss_and_grad(SPEC, LossStrategy(), update.params, client.data, StrategyContext())
        losses = list(update.epoch_losses) + [final_loss]
        for before, after in zip(losses, losses[1:]):
            assert after <= before

    def test_strong_proximal_term_stays_near_global(self):
        """Test that FedProx with a large mu moves less than FedAvg from the same start."""
        plain = ClientConfig(batch_size=8, local_lr=1e-4)
        prox = ClientConfig(batch_size=8, local_lr=1e-4, strategy=LossStrategy(StrategyKind.FEDPROX, mu=1e4))
        avg_update, _ = local_train(self.global_params, self.client, self.state, plain, epochs=3)
        prox_update, _ = local_train(self.global_params, self.client, self.state, prox, epochs=3)
        avg_shift = np.linalg.norm(avg_update.params.values - self.global_params.values)
        prox_shift = np.linalg.norm(prox_update.params.values - self.global_params.values)
        assert 0 < prox_shift < avg_shift
