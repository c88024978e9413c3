from __future__ import annotations

import numpy as np
import pytest

from mergelab import interventions as iv
from mergelab import tensor as tn
from mergelab.errors import ContractError, IntegrityError, NumericError
from mergelab.tensor import Tensor, grad_check
from mergelab.transformer import encode, head_logits

from conftest import small_config, small_model

K4_W1 = np.array([[1.0], [0.0]])
K4_W2 = np.array([[0.0], [1.0]])


def test_full_intervention_examples():
    z = np.array([1.0, 2.0])
    assert np.array_equal(iv.full_intervention(z, np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(1)).numpy(), z)
    out = iv.full_intervention(z, K4_W1, K4_W2, np.array([0.5])).numpy()
    assert np.array_equal(out, [1.0, 1.5])


def test_full_intervention_rank_too_large():
    with pytest.raises(ContractError):
        iv.full_intervention(np.ones(2), np.zeros((2, 3)), np.zeros((2, 3)), np.zeros(3))


def test_full_intervention_gradient(rng):
    z = rng.normal(size=(3, 6))
    w = rng.normal(size=(3, 6))
    p = {"W1": rng.normal(size=(6, 2)), "W2": rng.normal(size=(6, 2)), "b": rng.normal(size=2), "z": z}
    err = grad_check(lambda q: tn.tsum(tn.mul(iv.full_intervention(q["z"], q["W1"], q["W2"], q["b"]), w)), p)
    assert err < 1e-5


def test_mini_intervention_examples():
    z = np.array([1.0, 2, 3, 4])
    zero = {"W1": np.zeros((2, 1)), "W2": np.zeros((2, 1)), "b": np.zeros(1)}
    assert np.array_equal(iv.mini_intervention(z, "P4", zero, 2, 4).numpy(), z)
    p = {"W1": K4_W1, "W2": K4_W2, "b": np.array([0.5])}
    assert np.array_equal(iv.mini_intervention(z, "P4", p, 0, 2).numpy(), [1, 1.5, 3, 4])
    with pytest.raises(ContractError):
        iv.mini_intervention(z, "P4", p, 3, 5)


def test_full_slice_mini_equals_full(rng):
    z = rng.normal(size=(5, 8))
    p = {"W1": rng.normal(size=(8, 3)), "W2": rng.normal(size=(8, 3)), "b": rng.normal(size=3)}
    a = iv.mini_intervention(z, "P4", p, 0, 8).numpy()
    b = iv.full_intervention(z, p["W1"], p["W2"], p["b"]).numpy()
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("pattern", iv.R_PATTERNS + ("P4",))
def test_slice_locality(pattern, rng):
    z = rng.normal(size=(4, 10))
    spec = iv.InterventionSpec(pattern, 2, slice=(3, 7))
    params = iv.init_params(spec, [0], 1, 10, rng)
    params = {k.rsplit(".", 1)[-1]: v for k, v in params.items()}
    for leaf in params:
        if leaf != "R":
            params[leaf] = params[leaf] + rng.normal(size=params[leaf].shape)
    out = iv.mini_intervention(z, pattern, params, 3, 7).numpy()
    assert np.array_equal(out[:, :3], z[:, :3]) and np.array_equal(out[:, 7:], z[:, 7:])


def _orthonormal(rng, d, r):
    return iv.reorthonormalize(rng.normal(size=(d, r)))


def test_pattern_formulas_against_direct_evaluation(rng):
    d, r = 6, 2
    h = rng.normal(size=d)
    R = _orthonormal(rng, d, r)
    W, W1, W2 = rng.normal(size=(3, d, r))
    b = rng.normal(size=r)
    want = {
        "P1": h + R @ b,
        "P2": h + R @ (b - R.T @ h),
        "P3": h + R @ (W.T @ h + b),
        "P4": h + W2 @ (W1.T @ h + b - W2.T @ h),
        "P5": h + R @ (W.T @ h + b - R.T @ h),
    }
    params = {"P1": {"R": R, "b": b}, "P2": {"R": R, "b": b}, "P3": {"R": R, "W": W, "b": b},
              "P4": {"W1": W1, "W2": W2, "b": b}, "P5": {"R": R, "W": W, "b": b}}
    for pattern, expected in want.items():
        got = iv.pattern_apply(h, pattern, params[pattern]).numpy()
        assert np.allclose(got, expected, atol=1e-12), pattern


def test_pattern_identity_cases(rng):
    h = rng.normal(size=5)
    R = _orthonormal(rng, 5, 2)
    assert np.array_equal(iv.pattern_apply(h, "P1", {"R": R, "b": np.zeros(2)}).numpy(), h)
    fixed = iv.pattern_apply(h, "P2", {"R": R, "b": R.T @ h}).numpy()
    assert np.allclose(fixed, h, atol=1e-15)


def test_p4_pattern_matches_full_intervention(rng):
    for _ in range(50):
        h = rng.normal(size=8)
        p = {"W1": rng.normal(size=(8, 2)), "W2": rng.normal(size=(8, 2)), "b": rng.normal(size=2)}
        a = iv.pattern_apply(h, "P4", p).numpy()
        b = iv.full_intervention(h, p["W1"], p["W2"], p["b"]).numpy()
        assert np.abs(a - b).max() == 0


def test_non_orthonormal_r_is_rejected():
    with pytest.raises(IntegrityError):
        iv.pattern_apply(np.ones(2), "P1", {"R": np.array([[2.0], [0.0]]), "b": np.zeros(1)})


def test_surgery_examples(rng):
    assert np.array_equal(iv.surgery_adapter(np.array([1.0, -1]), np.zeros((2, 1)), np.ones((1, 2))).numpy(), [0, 0])
    out = iv.surgery_adapter(np.array([1.0, -1]), np.array([[1.0], [0.0]]), np.array([[2.0, 0.0]])).numpy()
    assert np.array_equal(out, [2, 0])
    h = rng.normal(size=(3, 6))
    wd = rng.normal(size=(6, 2))
    while np.min(np.abs(h @ wd)) < 1e-3:  # stay away from the ReLU kink
        wd = rng.normal(size=(6, 2))
    w = rng.normal(size=(3, 6))
    err = grad_check(lambda q: tn.tsum(tn.mul(iv.surgery_adapter(q["h"], q["d"], q["u"]), w)),
                     {"h": h, "d": wd, "u": rng.normal(size=(2, 6))})
    assert err < 1e-5


def test_select_tokens():
    assert iv.select_tokens("cls", 17) == (0,)
    assert iv.select_tokens("middle_patch", 17) == (9,)
    assert iv.select_tokens("all_tokens", 5) == (0, 1, 2, 3, 4)
    assert iv.select_tokens("first_patch", 17) == (1,)
    assert iv.select_tokens("last_patch", 17) == (16,)
    assert iv.select_tokens("all_patches", 4) == (1, 2, 3)
    with pytest.raises(ContractError):
        iv.select_tokens("cls", 1)


def test_count_extra_params_vitb32_scale():
    assert iv.count_extra_params(iv.InterventionSpec("P4", 1), 8, 12, 768) == 147_552
    assert iv.count_extra_params(iv.InterventionSpec("P4", 1, blocks=(12,)), 8, 12, 768) == 12_296
    assert iv.count_extra_params(iv.InterventionSpec("P4", 1, blocks=()), 8, 12, 768) == 0
    # exact counts where the published table rounds differently
    assert iv.count_extra_params(iv.InterventionSpec("P1", 1, slice=(0, 64)), 8, 12, 768) == 6_240
    assert iv.count_extra_params(iv.InterventionSpec("SURGERY", 16), 8, 12, 768) == 196_608


@pytest.mark.parametrize("spec", [
    iv.InterventionSpec("P4", 1), iv.InterventionSpec("P4", 3, blocks=(2,)),
    iv.InterventionSpec("P1", 2, slice=(0, 4)), iv.InterventionSpec("P2", 1, slice=(2, 6), shift_per_block=1),
    iv.InterventionSpec("P3", 2), iv.InterventionSpec("P5", 1, slice=(0, 8)), iv.InterventionSpec("SURGERY", 3),
])
def test_count_matches_enumerated_parameters(spec, rng):
    params = iv.init_params(spec, [0, 1, 2], 3, 8, rng)
    assert iv.count_extra_params(spec, 3, 3, 8) == sum(v.size for v in params.values())


def test_reorthonormalize(rng):
    Q = _orthonormal(rng, 6, 2)
    assert np.abs(iv.reorthonormalize(Q) - Q).max() < 1e-12
    assert np.allclose(iv.reorthonormalize(np.array([[2.0], [0.0]])), [[1], [0]], atol=0)
    R = rng.normal(size=(8, 3))
    Q = iv.reorthonormalize(R)
    assert np.abs(Q.T @ Q - np.eye(3)).max() < 1e-10
    P_R = R @ np.linalg.solve(R.T @ R, R.T)
    assert np.abs(Q @ Q.T - P_R).max() < 1e-8
    with pytest.raises(NumericError):
        iv.reorthonormalize(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_shift_schedule_never_wraps():
    spec = iv.InterventionSpec("P1", 1, slice=(0, 8), shift_per_block=8)
    starts = [spec.slice_for_block(b, 32)[0] for b in range(1, 9)]
    assert starts == [0, 8, 16, 24, 7, 15, 23, 6]  # modulus k - w + 1 = 25
    assert all(s + 8 <= 32 for s in starts)
    auto = iv.InterventionSpec("P1", 1, slice=(0, 8))
    assert [auto.slice_for_block(b, 32) for b in range(1, 5)] == [(0, 8), (8, 16), (16, 24), (24, 32)]
    fixed = iv.InterventionSpec("P1", 1, slice=(0, 8), shift_per_block=0)
    assert {fixed.slice_for_block(b, 32) for b in range(1, 5)} == {(0, 8)}
    assert iv.InterventionSpec("P4", 1).slice_for_block(3, 32) == (0, 32)


def test_spec_validation():
    assert iv.InterventionSpec("P9").problems()
    assert iv.InterventionSpec("P4", 5, slice=(0, 4)).problems(k=8)
    assert iv.InterventionSpec("P4", 1, slice=(4, 12)).problems(k=8)
    assert iv.InterventionSpec("P4", 1, blocks=(0, 3)).problems(k=8, N=2)
    assert iv.InterventionSpec("SURGERY", 2, slice=(0, 4)).problems(k=8)
    assert iv.InterventionSpec("P4", 1, tokens="everything").problems()
    assert not iv.InterventionSpec("P5", 2, slice=(0, 4), shift_per_block=4).problems(k=8, N=4)


@pytest.mark.parametrize("pattern", ["P1", "P3", "P4"])
@pytest.mark.parametrize("tokens", ["cls", "all_tokens", "middle_patch"])
def test_zero_init_is_identity_for_whole_network(pattern, tokens, rng):
    cfg = small_config()
    params = small_model(cfg)
    spec = iv.InterventionSpec(pattern, 2, tokens=tokens)
    ip = iv.init_params(spec, [0, 1], cfg.num_blocks, cfg.dim, rng, zero=True)
    x = rng.integers(0, 16, size=(10, cfg.seq_len - 1))
    for t in range(2):
        mods = iv.bind(spec, ip, t, cfg.dim, cfg.seq_len, cfg.num_blocks)
        a = head_logits(encode(x, params, cfg), params, cfg, t).numpy()
        b = head_logits(encode(x, params, cfg, mods), params, cfg, t).numpy()
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("pattern", ["P1", "P3", "P4", "P5"])
def test_default_training_init_is_exact_identity(pattern, rng):
    cfg = small_config()
    params = small_model(cfg)
    spec = iv.InterventionSpec(pattern, 2)
    ip = iv.init_params(spec, [0], cfg.num_blocks, cfg.dim, rng)
    x = rng.integers(0, 16, size=(6, cfg.seq_len - 1))
    mods = iv.bind(spec, ip, 0, cfg.dim, cfg.seq_len, cfg.num_blocks)
    assert encode(x, params, cfg).numpy().tobytes() == encode(x, params, cfg, mods).numpy().tobytes()


def test_p2_and_zero_p5_are_not_identities(rng):
    h = rng.normal(size=6)
    R = _orthonormal(rng, 6, 2)
    for pattern, p in (("P2", {"R": R, "b": np.zeros(2)}), ("P5", {"R": R, "W": np.zeros((6, 2)), "b": np.zeros(2)})):
        assert np.allclose(iv.pattern_apply(h, pattern, p).numpy(), h - R @ (R.T @ h), atol=1e-12)


def test_bind_assembles_every_block(rng):
    cfg = small_config(N=3)
    spec = iv.InterventionSpec("P4", 1, blocks=(1, 3))
    ip = iv.init_params(spec, [0, 1], cfg.num_blocks, cfg.dim, rng)
    mods = iv.bind(spec, ip, 1, cfg.dim, cfg.seq_len, cfg.num_blocks)
    assert sorted(mods.blocks) == [1, 3] and mods.get(2) is None
    assert all(m.task == 1 for m in mods.modules())
    surgery = iv.InterventionSpec("SURGERY", 2)
    sp = iv.init_params(surgery, [0], cfg.num_blocks, cfg.dim, rng)
    bound = iv.bind(surgery, sp, 0, cfg.dim, cfg.seq_len, cfg.num_blocks)
    assert bound.post is not None and not bound.blocks


def test_max_ortho_error_and_enforcement(rng):
    params = {"t0.b1.R": rng.normal(size=(6, 2)), "t0.b1.b": np.zeros(2)}
    assert iv.max_ortho_error(params) > 1e-3
    iv.enforce_orthonormality(params)
    assert iv.max_ortho_error(params) < 1e-12
