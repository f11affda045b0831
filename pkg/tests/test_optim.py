"""
Тесты механики обучения: округление bfloat16, Adam, модифицированный Adafactor,
раздельный weight decay, клиппинг градиентов и усреднение Polyak
"""

import math

import numpy as np
import pytest

from vitscale.core.exceptions import (
    ConfigurationError,
    ContractError,
    NonFiniteGradientError,
    ShapeError,
    UnknownOptimizerError,
)
from vitscale.core.optim import (
    DEFAULT_WD_RULES,
    AdafactorState,
    AdamState,
    OptimConfig,
    Optimizer,
    WeightDecayRule,
    adafactor_step,
    adam_step,
    bf16_round,
    beta2_at,
    clip_global_norm,
    decay_multiplier,
    decay_params,
    global_norm,
    parse_wd_rules,
    polyak_update,
)
from vitscale.core.tensor import Tensor


def bf16_via_float32_bits(values: np.ndarray) -> np.ndarray:
    """Эталон: round-to-nearest-even на битах float32"""
    bits = np.asarray(values, dtype=np.float32).view(np.uint32)
    rounded = (bits + np.uint32(0x7FFF) + ((bits >> 16) & np.uint32(1)))
    rounded = rounded & np.uint32(0xFFFF0000)
    return rounded.view(np.float32).astype(np.float64)


# =============================================================================
# bfloat16
# =============================================================================

class TestBf16Round:
    """Округление до ближайшего bfloat16"""

    def test_pi(self):
        assert bf16_round(3.14159265) == 3.140625
        assert bf16_round(3.14159265) == bf16_via_float32_bits(
            np.array([3.14159265]))[0]

    def test_matches_bit_oracle(self, rng):
        # значения, точно представимые во float32, исключают двойное округление
        values = (rng.standard_normal(5000) * 10.0 ** rng.integers(-20, 20, 5000))
        values = values.astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(bf16_round(values),
                                      bf16_via_float32_bits(values))

    def test_ties_to_even(self):
        assert bf16_round(1.0 + 2.0 ** -8) == 1.0
        assert bf16_round(1.0 + 3 * 2.0 ** -8) == 1.0 + 2.0 ** -6

    def test_special_values(self):
        out = bf16_round(np.array([np.inf, -np.inf, np.nan, -0.0]))
        assert out[0] == np.inf and out[1] == -np.inf
        assert np.isnan(out[2])
        assert out[3] == 0.0 and np.signbit(out[3])

    def test_scalar_and_array_types(self):
        assert isinstance(bf16_round(1.5), float)
        assert bf16_round(np.ones((2, 3))).shape == (2, 3)

    def test_idempotent(self, rng):
        once = bf16_round(rng.standard_normal(100))
        np.testing.assert_array_equal(bf16_round(once), once)


# =============================================================================
# Adam
# =============================================================================

class TestAdam:
    """Шаг Adam с коррекцией смещения"""

    def test_first_step_is_sign_update(self, rng):
        param = rng.standard_normal((3, 4))
        grad = rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
        state = AdamState.zeros_like(param)
        new = adam_step(param, grad, state, lr=0.01)
        np.testing.assert_allclose(new, param - 0.01 * np.sign(grad), atol=1e-9)
        assert state.t == 1

    def test_bf16_momentum_storage(self, rng):
        param = rng.standard_normal(16)
        state = AdamState.zeros_like(param, momentum_storage="bf16")
        for _ in range(3):
            param = adam_step(param, rng.standard_normal(16), state, lr=1e-3)
        np.testing.assert_array_equal(state.m, bf16_round(state.m))
        # второй момент в полной точности
        assert not np.array_equal(state.v, bf16_round(state.v))

    def test_quadratic_both_storages(self):
        finals = {}
        for storage in ("full64", "bf16"):
            x = np.array([1.0])
            state = AdamState.zeros_like(x, momentum_storage=storage)
            for _ in range(200):
                x = adam_step(x, 2.0 * x, state, lr=0.1)
            finals[storage] = x[0]
            assert abs(x[0]) < 1e-2
        assert abs(finals["full64"] - finals["bf16"]) < 1e-2

    def test_storages_agree_on_representable_momentum(self):
        # beta1 = 0.5 и градиенты-степени двойки: m точно представим в bfloat16
        config = OptimConfig(beta1=0.5)
        grad = np.array([0.125, 0.5, 2.0, -1.0])
        full = AdamState.zeros_like(grad, momentum_storage="full64")
        half = AdamState.zeros_like(grad, momentum_storage="bf16")
        a = b = np.zeros(4)
        for _ in range(6):
            a = adam_step(a, grad, full, lr=1e-2, config=config)
            b = adam_step(b, grad, half, lr=1e-2, config=config)
            np.testing.assert_array_equal(full.m, bf16_round(full.m))
        np.testing.assert_array_equal(full.m, half.m)
        np.testing.assert_array_equal(a, b)

    def test_unknown_storage(self):
        with pytest.raises(ConfigurationError):
            AdamState.zeros_like(np.zeros(3), momentum_storage="fp8")

    def test_shape_mismatch(self):
        state = AdamState.zeros_like(np.zeros(3))
        with pytest.raises(ShapeError):
            adam_step(np.zeros(3), np.zeros(4), state, lr=1.0)

    def test_nan_gradient(self):
        state = AdamState.zeros_like(np.zeros(2))
        with pytest.raises(NonFiniteGradientError):
            adam_step(np.zeros(2), np.array([np.nan, 1.0]), state, lr=1.0)


# =============================================================================
# Adafactor
# =============================================================================

class TestAdafactor:
    """Факторизованный второй момент, beta2(t), клиппинг обновления"""

    def test_beta2_schedule(self):
        assert beta2_at(1) == 0.0
        assert beta2_at(10) == pytest.approx(1 - 10 ** -0.8)
        assert beta2_at(10 ** 6) == 0.999

    def test_beta2_requires_positive_step(self):
        with pytest.raises(ContractError):
            beta2_at(0)

    def test_rank_one_exactness(self, rng):
        u = rng.uniform(0.5, 2.0, 6)
        v = rng.uniform(0.5, 2.0, 4)
        grad = np.outer(u, v)
        state = AdafactorState.zeros_like(grad)
        adafactor_step(np.zeros_like(grad), grad, state, lr=1e-3)
        np.testing.assert_allclose(state.second_moment(), grad * grad,
                                   rtol=1e-12, atol=0)

    def test_factored_sum_matches_full(self, rng):
        shape = (7, 5)
        param = rng.standard_normal(shape)
        state = AdafactorState.zeros_like(param)
        config = OptimConfig()
        full = np.zeros(shape)
        for t in range(1, 6):
            grad = rng.standard_normal(shape)
            beta2 = beta2_at(t, config)
            full = beta2 * full + (1 - beta2) * (grad * grad + config.eps_factored)
            param = adafactor_step(param, grad, state, lr=1e-3, config=config)
        assert state.second_moment().sum() == pytest.approx(full.sum(), rel=1e-10)

    def test_positive_definite_quadratic_alongside_adam(self, rng):
        q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
        A = q @ np.diag(np.linspace(1.0, 10.0, 10)) @ q.T
        x0 = rng.standard_normal(10) + 1.0

        def loss(x):
            return 0.5 * x @ A @ x

        x_adam, x_factored = x0.copy(), x0.copy()
        adam_state = AdamState.zeros_like(x0)
        factored_state = AdafactorState.zeros_like(x0)
        for _ in range(2000):
            x_adam = adam_step(x_adam, A @ x_adam, adam_state, lr=1e-2)
            x_factored = adafactor_step(x_factored, A @ x_factored, factored_state,
                                        lr=1e-2)
        assert loss(x_adam) < 1e-2 * loss(x0)
        assert loss(x_factored) < 1e-2 * loss(x0)

    def test_vectors_not_factored(self):
        state = AdafactorState.zeros_like(np.zeros(5))
        assert not state.factored
        assert state.v.shape == (5,)

    def test_batched_matrix_accumulators(self):
        state = AdafactorState.zeros_like(np.zeros((2, 3, 4)))
        assert state.row.shape == (2, 3)
        assert state.col.shape == (2, 4)

    def test_update_rms_clipped(self, rng):
        param = np.zeros((8, 8))
        grad = rng.standard_normal((8, 8))
        state = AdafactorState.zeros_like(param)
        lr = 0.5
        new = adafactor_step(param, grad, state, lr=lr)
        rms = math.sqrt(np.mean((new / lr) ** 2))
        # beta1 = 0.9: первый момент равен 0.1 * обновление с RMS <= 1
        assert rms <= 0.1 * (1 + 2 ** -7)

    def test_momentum_in_bf16(self, rng):
        param = rng.standard_normal((4, 3))
        state = AdafactorState.zeros_like(param)
        adafactor_step(param, rng.standard_normal((4, 3)), state, lr=1e-2)
        np.testing.assert_array_equal(state.m, bf16_round(state.m))


# =============================================================================
# Оптимизатор по именам параметров
# =============================================================================

class TestOptimizer:
    """Режимы adam, adam-hp, adafactor-mod"""

    def params(self, rng):
        return {"w/kernel": Tensor(rng.standard_normal((4, 3))),
                "w/bias": Tensor(rng.standard_normal(3))}

    def test_unknown_mode(self):
        with pytest.raises(UnknownOptimizerError):
            Optimizer("sgd")

    @pytest.mark.parametrize("mode", ["adam", "adam-hp", "adafactor-mod"])
    def test_step_updates_in_place(self, rng, mode):
        params = self.params(rng)
        before = {n: p.data.copy() for n, p in params.items()}
        grads = {n: rng.standard_normal(p.shape) for n, p in params.items()}
        Optimizer(mode).step(params, grads, lr=1e-2)
        for name in params:
            assert not np.array_equal(params[name].data, before[name])

    def test_non_finite_rejects_whole_step(self, rng):
        params = self.params(rng)
        before = {n: p.data.copy() for n, p in params.items()}
        grads = {"w/kernel": rng.standard_normal((4, 3)),
                 "w/bias": np.array([0.0, np.inf, 0.0])}
        with pytest.raises(NonFiniteGradientError):
            Optimizer("adam").step(params, grads, lr=1e-2)
        for name in params:
            np.testing.assert_array_equal(params[name].data, before[name])

    def test_missing_gradient_skipped(self, rng):
        params = self.params(rng)
        bias = params["w/bias"].data.copy()
        Optimizer("adam").step(params, {"w/kernel": np.ones((4, 3))}, lr=1e-2)
        np.testing.assert_array_equal(params["w/bias"].data, bias)

    def test_state_bytes_by_mode(self, rng):
        sizes = {}
        for mode in ("adam", "adam-hp", "adafactor-mod"):
            params = self.params(rng)
            grads = {n: np.ones(p.shape) for n, p in params.items()}
            optimizer = Optimizer(mode)
            optimizer.step(params, grads, lr=1e-3)
            sizes[mode] = optimizer.state_nbytes()
        assert sizes["adam"] == 15 * 8
        assert sizes["adam-hp"] == 15 * 6
        # матрица: m в bf16 и аккумуляторы 4 + 3; вектор: m и полный v
        assert sizes["adafactor-mod"] == 12 * 2 + 7 * 4 + 3 * 2 + 3 * 4


# =============================================================================
# Weight decay
# =============================================================================

class TestWeightDecay:
    """Раздельный decay головы и тела"""

    BASE_WD = 0.03 * 8e-4

    def test_head_body_factors(self):
        params = {"head/kernel": Tensor(np.ones(2)),
                  "block0/mlp/fc1/kernel": Tensor(np.ones(2)),
                  "block0/mlp/fc1/bias": Tensor(np.ones(2))}
        factors = decay_params(params, DEFAULT_WD_RULES, self.BASE_WD)
        assert factors["head/kernel"] == pytest.approx(0.9976)
        assert factors["block0/mlp/fc1/kernel"] == pytest.approx(0.999976)
        assert "block0/mlp/fc1/bias" not in factors
        np.testing.assert_allclose(params["head/kernel"].data, 0.9976)
        np.testing.assert_array_equal(params["block0/mlp/fc1/bias"].data, 1.0)

    def test_log_shrinkage_ratio(self):
        params = {"head/kernel": Tensor([2.0]), "embed/kernel": Tensor([2.0])}
        decay_params(params, DEFAULT_WD_RULES, self.BASE_WD)
        head = math.log(params["head/kernel"].data[0] / 2.0)
        body = math.log(params["embed/kernel"].data[0] / 2.0)
        assert head / body == pytest.approx(100.0, rel=0.003)

    def test_first_matching_rule_wins(self):
        assert decay_multiplier("head/kernel", DEFAULT_WD_RULES) == 100.0
        assert decay_multiplier("map/q/kernel", DEFAULT_WD_RULES) == 1.0
        assert decay_multiplier("pos_embedding", DEFAULT_WD_RULES) == 0.0

    def test_parse_rules(self):
        rules = parse_wd_rules([[".*head/kernel", 10], [".*/bias", 0.5]])
        assert rules[0] == WeightDecayRule(".*head/kernel", 10.0)
        assert decay_multiplier("block0/ln1/bias", rules) == 0.5

    def test_shrink_at_least_one_rejected(self):
        params = {"head/kernel": Tensor(np.ones(2))}
        with pytest.raises(ConfigurationError):
            decay_params(params, DEFAULT_WD_RULES, base_wd=0.01)
        np.testing.assert_array_equal(params["head/kernel"].data, 1.0)

    def test_invalid_rules(self):
        with pytest.raises(ConfigurationError):
            WeightDecayRule("(", 1.0)
        with pytest.raises(ConfigurationError):
            WeightDecayRule(".*", -1.0)


# =============================================================================
# Клиппинг и Polyak
# =============================================================================

class TestClipping:
    """Совместная норма всех градиентов"""

    def test_joint_norm_equals_concatenated(self, rng):
        grads = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5)}
        flat = np.concatenate([grads["a"].ravel(), grads["b"]])
        assert global_norm(grads) == pytest.approx(np.linalg.norm(flat), abs=1e-12)

    def test_clips_to_max_norm(self, rng):
        grads = [rng.standard_normal(10) * 10, rng.standard_normal(3) * 10]
        clipped, norm = clip_global_norm(grads, 1.0)
        assert norm > 1.0
        assert global_norm(clipped) == pytest.approx(1.0)
        np.testing.assert_allclose(clipped[0] / grads[0], 1.0 / norm)

    def test_small_gradients_untouched(self):
        grads = {"a": np.array([0.3, 0.4])}
        clipped, norm = clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_array_equal(clipped["a"], grads["a"])

    def test_non_finite_norm(self):
        with pytest.raises(NonFiniteGradientError):
            clip_global_norm([np.array([np.nan])], 1.0)

    def test_non_positive_max_norm(self):
        with pytest.raises(ContractError):
            clip_global_norm([np.ones(2)], 0.0)


class TestPolyak:
    """Экспоненциальное среднее параметров"""

    def test_alternating_signs_closed_form(self):
        decay = 0.9
        avg = {"w": np.zeros(1)}
        steps = 200
        for k in range(1, steps + 1):
            avg = polyak_update(avg, {"w": np.array([(-1.0) ** (k + 1)])}, decay)
        expected = -(1 - decay) / (1 + decay) * (1 - decay ** steps)
        assert avg["w"][0] == pytest.approx(expected, rel=1e-12)
        assert -1.0 < avg["w"][0] < 1.0

    def test_zero_decay_copies_params(self):
        avg = polyak_update({"w": np.zeros(3)}, {"w": Tensor([1.0, 2.0, 3.0])}, 0.0)
        np.testing.assert_array_equal(avg["w"], [1.0, 2.0, 3.0])

    def test_invalid_decay(self):
        with pytest.raises(ConfigurationError):
            polyak_update({"w": np.zeros(1)}, {"w": np.zeros(1)}, 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            polyak_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.5)
