import numpy as np
import pytest

from quality_fusion.dmqa import FeatureMap
from quality_fusion.errors import ContractViolation, ProtocolBoundError
from quality_fusion.missing import (
    MR_GRID,
    AvailabilitySchedule,
    DegradationSpec,
    apply_missing,
    degrade,
    measured_mr,
    mix_seed,
    parse_policy,
    read_schedule_csv,
    sample_availability,
    write_schedule_csv,
)


def _schedule(optical, sar):
    return AvailabilitySchedule(optical=np.array(optical, dtype=bool), sar=np.array(sar, dtype=bool))


def test_zero_rate_keeps_everything():
    schedule = sample_availability(100, 0.0, seed=3)
    assert np.all(schedule.optical) and np.all(schedule.sar)
    assert measured_mr(schedule) == 0.0


def test_half_rate_drops_exactly_one_modality():
    schedule = sample_availability(1000, 0.5, seed=3)
    np.testing.assert_array_equal(schedule.available_counts(), np.ones(1000, dtype=np.int64))
    assert measured_mr(schedule) == 0.5


@pytest.mark.parametrize("target", MR_GRID)
def test_measured_rate_tracks_target(target):
    schedule = sample_availability(10_000, target, seed=11)
    assert abs(measured_mr(schedule) - target) <= 0.02
    assert np.all(schedule.available_counts() >= 1)


def test_rate_above_bound_is_rejected():
    with pytest.raises(ProtocolBoundError):
        sample_availability(10, 0.51, seed=0)
    with pytest.raises(ProtocolBoundError):
        sample_availability(10, -0.1, seed=0)


def test_schedule_is_seed_deterministic():
    a = sample_availability(500, 0.3, seed=42)
    b = sample_availability(500, 0.3, seed=42)
    assert a.optical.tobytes() == b.optical.tobytes()
    assert a.sar.tobytes() == b.sar.tobytes()


def test_measured_mr_examples():
    assert measured_mr(_schedule([1, 1, 1, 0], [1, 0, 1, 1])) == 0.25
    assert measured_mr(AvailabilitySchedule.complete(6)) == 0.0
    assert measured_mr(_schedule([1, 0, 1], [0, 1, 0])) == 0.5


def test_measured_mr_empty_schedule():
    with pytest.raises(ContractViolation):
        measured_mr(AvailabilitySchedule.complete(0))


def test_schedule_rejects_double_drop():
    with pytest.raises(ContractViolation):
        _schedule([1, 0], [1, 0])


def test_schedule_csv_roundtrip(tmp_path):
    schedule = sample_availability(20, 0.4, seed=5)
    write_schedule_csv(schedule, tmp_path / "schedule.csv")
    loaded = read_schedule_csv(tmp_path / "schedule.csv")
    np.testing.assert_array_equal(loaded.optical, schedule.optical)
    np.testing.assert_array_equal(loaded.sar, schedule.sar)
    header = (tmp_path / "schedule.csv").read_text().splitlines()[0]
    assert header == "sample_id,optical_available,sar_available"


def test_mix_seed_separates_streams():
    assert mix_seed(1, 2) == mix_seed(1, 2)
    assert mix_seed(1, 2) != mix_seed(2, 1)
    assert 0 <= mix_seed(7) < 2**64


# ---------------------------------------------------------------------------
# policies and degradation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "text,kind,severity,label",
    [
        ("zero", "zero_fill", 0.0, "zero"),
        ("noise:0.5", "gaussian_noise", 0.5, "noise:0.5"),
        ("occlusion:0.25", "patch_occlusion", 0.25, "occlusion:0.25"),
        ("gaussian_noise:1", "gaussian_noise", 1.0, "noise:1"),
    ],
)
def test_parse_policy(text, kind, severity, label):
    spec = parse_policy(text)
    assert (spec.kind, spec.severity, spec.label) == (kind, severity, label)


@pytest.mark.parametrize("text", ["blur", "noise:abc", "occlusion:1.5", "noise:-1"])
def test_parse_policy_rejects(text):
    with pytest.raises(ContractViolation):
        parse_policy(text)


def test_degrade_severity_zero_is_identity(rng):
    f = rng.standard_normal((8, 3))
    for kind in ("gaussian_noise", "patch_occlusion"):
        np.testing.assert_array_equal(degrade(f, DegradationSpec(kind=kind, severity=0.0)), f)


def test_full_occlusion_zeroes_slice(rng):
    out = degrade(rng.standard_normal((8, 3)), DegradationSpec(kind="patch_occlusion", severity=1.0))
    np.testing.assert_array_equal(out, np.zeros((8, 3)))


def test_partial_occlusion_is_contiguous(rng):
    f = rng.standard_normal((10, 3)) + 5.0
    out = degrade(f, DegradationSpec(kind="patch_occlusion", severity=0.3, seed=9))
    zero_rows = np.flatnonzero(np.all(out == 0.0, axis=1))
    assert zero_rows.size == 3
    assert np.all(np.diff(zero_rows) == 1)
    kept = np.setdiff1d(np.arange(10), zero_rows)
    np.testing.assert_array_equal(out[kept], f[kept])


def test_gaussian_noise_std(rng):
    f = rng.standard_normal((100, 100))
    out = degrade(f, DegradationSpec(kind="gaussian_noise", severity=1.0, seed=21))
    assert 0.97 <= float(np.std(out - f)) <= 1.03


def test_degrade_is_deterministic(rng):
    f = rng.standard_normal((6, 4))
    spec = DegradationSpec(kind="gaussian_noise", severity=0.7, seed=4)
    assert degrade(f, spec, stream=(3, 1)).tobytes() == degrade(f, spec, stream=(3, 1)).tobytes()
    assert not np.array_equal(degrade(f, spec, stream=(3, 1)), degrade(f, spec, stream=(3, 0)))


# ---------------------------------------------------------------------------
# apply_missing
# ---------------------------------------------------------------------------


def test_complete_schedule_is_identity(rng):
    f_r = rng.standard_normal((5, 4, 3))
    f_s = rng.standard_normal((5, 4, 3))
    out_r, out_s = apply_missing(f_r, f_s, AvailabilitySchedule.complete(5), parse_policy("zero"))
    assert out_r.values.tobytes() == f_r.tobytes()
    assert out_s.values.tobytes() == f_s.tobytes()


def test_zero_fill_missing_sar(rng):
    f_r = rng.standard_normal((2, 4, 3))
    f_s = rng.standard_normal((2, 4, 3))
    out_r, out_s = apply_missing(FeatureMap(f_r), FeatureMap(f_s), _schedule([1, 1], [1, 0]), parse_policy("zero"))
    np.testing.assert_array_equal(out_s.values[1], np.zeros((4, 3)))
    np.testing.assert_array_equal(out_r.values, f_r)
    np.testing.assert_array_equal(out_s.values[0], f_s[0])


def test_zero_noise_keeps_missing_entries(rng):
    f_r = rng.standard_normal((3, 4, 3))
    f_s = rng.standard_normal((3, 4, 3))
    out_r, out_s = apply_missing(f_r, f_s, _schedule([0, 1, 1], [1, 0, 1]), parse_policy("noise:0"))
    np.testing.assert_array_equal(out_r.values, f_r)
    np.testing.assert_array_equal(out_s.values, f_s)


def test_apply_missing_does_not_mutate_inputs(rng):
    f_r = rng.standard_normal((2, 4, 3))
    before = f_r.copy()
    apply_missing(f_r, f_r.copy(), _schedule([0, 1], [1, 1]), parse_policy("zero"))
    np.testing.assert_array_equal(f_r, before)


def test_apply_missing_length_mismatch(rng):
    f = rng.standard_normal((3, 4, 2))
    with pytest.raises(ContractViolation):
        apply_missing(f, f, AvailabilitySchedule.complete(2), parse_policy("zero"))
