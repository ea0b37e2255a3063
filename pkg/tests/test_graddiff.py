import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quality_fusion.dmqa import RELIABILITY_MODES, TokenBank, dmqa_assess
from quality_fusion.errors import ContractViolation, NonFiniteError
from quality_fusion.graddiff import (
    GROUPS,
    VARIANTS,
    Batch,
    GradReport,
    PipelineObjective,
    PipelineSettings,
    QuadraticObjective,
    backward,
    fd_check,
    init_params,
    pipeline_backward,
    pipeline_forward,
    relative_error,
    retract_projector,
    sgd_step,
    tangent_projection,
)
from quality_fusion.harness import check_problem
from quality_fusion.numerics import qr_orthonormalize
from quality_fusion.ocnf import OrthoProjector, channel_reliability, fusion_weights, ocnf_fuse


@pytest.fixture
def params(rng):
    return init_params(3, 2, 4, rng, output_scale=0.5)


def test_quadratic_gradient_is_identity(params):
    grads = backward(params, None, QuadraticObjective())
    for name, value in params.groups().items():
        np.testing.assert_array_equal(grads[name], value)


def test_group_outside_objective_has_zero_gradient(params):
    objective = QuadraticObjective(groups=("probe_w",))
    grads = backward(params, None, objective)
    np.testing.assert_array_equal(grads["tokens_r"], np.zeros_like(params.tokens_r))
    report = fd_check(params, None, objective, h=1e-3)
    assert report.max_relative_error["tokens_r"] == 0.0


def test_fd_check_exact_on_quadratic(params):
    report = fd_check(params, None, QuadraticObjective(), h=1e-3)
    assert set(report.max_relative_error) == set(GROUPS)
    assert report.max_error < 1e-9


def test_fd_check_rejects_bad_step(params):
    with pytest.raises(ContractViolation):
        fd_check(params, None, QuadraticObjective(), h=0.0)


@pytest.mark.parametrize("seed", range(20))
def test_pipeline_gradient_matches_central_differences(seed):
    problem = check_problem(seed)
    report = fd_check(problem.params, problem.batch, PipelineObjective(problem.settings), h=1e-5)
    assert report.max_error < 1e-5, report.to_dict()


def test_tiny_scalar_group_is_judged_on_the_gradient_scale():
    # seed 10 draws an alpha_raw gradient near 1.7e-7, where h=1e-5 roundoff dominates
    problem = check_problem(10)
    objective = PipelineObjective(problem.settings)
    report = fd_check(problem.params, problem.batch, objective, h=1e-5)
    assert report.max_relative_error["alpha_raw"] < 1e-5
    coarse = fd_check(problem.params, problem.batch, objective, h=1e-3, groups=("alpha_raw",))
    assert coarse.max_relative_error["alpha_raw"] < 1e-5


def test_relative_error_floor():
    analytic = np.array([1.0e-7])
    numeric = np.array([1.001e-7])
    assert relative_error(analytic, numeric) == pytest.approx(1e-10 / 1.001e-7, rel=1e-6)
    assert relative_error(analytic, numeric, floor=1e-2) == pytest.approx(1e-8, rel=1e-6)
    assert relative_error(np.array([]), np.array([])) == 0.0


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("mode", ["combined", "magnitude", "direction"])
def test_every_variant_has_exact_gradients(variant, mode):
    problem = check_problem(3, variant=variant, mode=mode)
    report = fd_check(problem.params, problem.batch, PipelineObjective(problem.settings), h=1e-5)
    assert report.max_error < 1e-5, report.to_dict()


def test_skipped_groups_get_zero_gradient():
    problem = check_problem(1, variant="mean_baseline")
    _, grads = pipeline_backward(problem.params, problem.batch, problem.settings)
    for name in GROUPS:
        if name not in ("probe_w", "probe_b"):
            assert not np.any(grads[name]), name
    assert np.any(grads["probe_w"])


def test_corrupted_gradient_is_flagged():
    problem = check_problem(5)
    _, grads = pipeline_backward(problem.params, problem.batch, problem.settings)
    corrupted = {name: 1.1 * g for name, g in grads.items()}
    report = fd_check(
        problem.params, problem.batch, PipelineObjective(problem.settings), analytic=corrupted
    )
    assert report.max_relative_error["probe_w"] == pytest.approx(0.1 / 1.1, abs=1e-4)
    assert report.max_error > 0.08


def test_backward_is_deterministic():
    problem = check_problem(2)
    _, a = pipeline_backward(problem.params, problem.batch, problem.settings)
    _, b = pipeline_backward(problem.params.copy(), problem.batch, problem.settings)
    for name in GROUPS:
        assert a[name].tobytes() == b[name].tobytes()


def test_non_finite_features_name_the_operation():
    problem = check_problem(0)
    optical = problem.batch.optical.copy()
    optical[0, 0, 0] = np.nan
    batch = Batch(optical=optical, sar=problem.batch.sar, labels=problem.batch.labels)
    with pytest.raises(NonFiniteError) as info:
        pipeline_backward(problem.params, batch, problem.settings)
    assert info.value.operation


def test_forward_reports_reliability_only_with_dmqa():
    problem = check_problem(0)
    full = pipeline_forward(problem.params, problem.batch, problem.settings)
    assert full.reliability_r is not None and full.gamma_r is not None
    baseline = pipeline_forward(problem.params, problem.batch, PipelineSettings(variant="mean_baseline"))
    assert baseline.reliability_r is None and baseline.gamma_r is None
    assert baseline.fused.shape == full.fused.shape


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.sampled_from(RELIABILITY_MODES))
def test_pipeline_forward_matches_module_operations(seed, mode):
    rng = np.random.default_rng(seed)
    params = init_params(4, 3, 3, rng, output_scale=0.5).replace(
        alpha_raw=np.array(rng.normal()), beta_raw=np.array(rng.normal())
    )
    batch = Batch(
        optical=rng.standard_normal((2, 5, 4)),
        sar=rng.standard_normal((2, 5, 4)),
        labels=rng.integers(0, 3, size=2),
    )
    settings_ = PipelineSettings(variant="full", iterations=3, mode=mode)
    output = pipeline_forward(params, batch, settings_)

    dmqa = params.dmqa_params(settings_)
    rel_r = dmqa_assess(batch.optical, TokenBank(params.tokens_r), dmqa)
    rel_s = dmqa_assess(batch.sar, TokenBank(params.tokens_s), dmqa)
    for piped, direct in ((output.reliability_r, rel_r), (output.reliability_s, rel_s)):
        for name in ("magnitude", "direction", "combined"):
            np.testing.assert_allclose(getattr(piped, name), getattr(direct, name), rtol=0, atol=1e-12)
        np.testing.assert_allclose(piped.final_tokens.tokens, direct.final_tokens.tokens, rtol=0, atol=1e-12)

    fusion = params.fusion_params()
    gamma_r, gamma_s = fusion_weights(channel_reliability(rel_r, fusion), channel_reliability(rel_s, fusion))
    fused = ocnf_fuse(batch.optical, batch.sar, params.ortho_projector(), gamma_r, gamma_s)
    np.testing.assert_allclose(output.gamma_r, gamma_r, rtol=0, atol=1e-12)
    np.testing.assert_allclose(output.fused, fused.values, rtol=0, atol=1e-12)

    gated = pipeline_forward(params, batch, PipelineSettings(variant="dmqa_only", iterations=3, mode=mode))
    lifted = 0.5 * (rel_r.combined[..., None] * batch.optical + rel_s.combined[..., None] * batch.sar)
    np.testing.assert_allclose(gated.fused, lifted @ params.lift.T, rtol=0, atol=1e-12)


def test_grad_report_to_dict():
    report = GradReport(max_relative_error={"b": 2e-7, "a": 1e-9}, h=1e-5, objective_value=1.5,
                        coordinates_checked={"a": 3, "b": 4})
    out = report.to_dict()
    assert list(out["max_relative_error"]) == ["a", "b"]
    assert out["max_error"] == 2e-7


# ---------------------------------------------------------------------------
# orthogonal-group steps
# ---------------------------------------------------------------------------


def test_tangent_projection_is_skew(rng):
    q = qr_orthonormalize(rng.standard_normal((6, 6)))
    xi = tangent_projection(q, rng.standard_normal((6, 6)))
    m = q.T @ xi
    np.testing.assert_allclose(m, -m.T, atol=1e-12)


def test_zero_gradient_keeps_projector(rng):
    q = qr_orthonormalize(rng.standard_normal((6, 6)))
    np.testing.assert_allclose(retract_projector(q, np.zeros((6, 6)), 0.5), q, atol=1e-12)


def test_retraction_rejects_drifted_projector(rng):
    with pytest.raises(ContractViolation):
        retract_projector(2.0 * np.eye(4), rng.standard_normal((4, 4)), 0.1)


@pytest.mark.parametrize("steps", [100, 500])
def test_constraints_survive_many_steps(steps):
    r = np.random.default_rng(steps)
    q = qr_orthonormalize(r.standard_normal((8, 8)))
    target = r.standard_normal((8, 8))
    for _ in range(steps):
        # random quadratic pull towards a moving target
        grad = q - target + 0.1 * r.standard_normal((8, 8))
        q = retract_projector(q, grad, 0.05)
        errors = OrthoProjector(joint=q).constraint_errors()
        assert errors["cross"] <= 1e-10
        assert errors["norm_r"] <= 1e-10 and errors["norm_s"] <= 1e-10
        assert errors["gram"] <= 1e-10


def test_sgd_zero_rate_returns_equal_copy(params):
    grads = backward(params, None, QuadraticObjective())
    stepped = sgd_step(params, grads, 0.0)
    for name in GROUPS:
        np.testing.assert_array_equal(getattr(stepped, name), getattr(params, name))
        assert getattr(stepped, name) is not getattr(params, name)


def test_sgd_quadratic_example(params):
    start = params.replace(probe_w=np.ones_like(params.probe_w))
    stepped = sgd_step(start, backward(start, None, QuadraticObjective()), 0.1)
    np.testing.assert_allclose(stepped.probe_w, np.full_like(start.probe_w, 0.9), atol=1e-15)
    # the quadratic's Euclidean gradient at Q is Q itself, whose tangent part vanishes
    np.testing.assert_allclose(stepped.projector, start.projector, atol=1e-12)


def test_sgd_keeps_projector_orthogonal(rng):
    problem = check_problem(4)
    params = problem.params
    for _ in range(10):
        _, grads = pipeline_backward(params, problem.batch, problem.settings)
        params = sgd_step(params, grads, 0.5)
    assert OrthoProjector(joint=params.projector).orthogonality_error() <= 1e-10


def test_sgd_skips_zero_gradient_groups(params):
    grads = {name: np.zeros_like(value) for name, value in params.groups().items()}
    grads["probe_b"] = np.ones_like(params.probe_b)
    stepped = sgd_step(params, grads, 0.1)
    np.testing.assert_array_equal(stepped.tokens_r, params.tokens_r)
    np.testing.assert_allclose(stepped.probe_b, params.probe_b - 0.1)
