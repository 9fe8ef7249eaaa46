import cascadeflow as cf
from cascadeflow.paths import DeltaPath
from cascadeflow.validate import (
    check_block_noise,
    check_delta_balance,
    check_endpoint_moments,
    check_jump_continuity,
    check_rollback_identities,
    run_validation,
)


def test_jump_continuity_small_block_passes_quickly():
    rep = check_jump_continuity(0.5, cf.ResampleFactors(2, 2, 1), draws=150_000, seed=0, label="n4")
    assert rep["pass"]
    assert rep["mean_map_max_abs_err"] <= 1e-6
    assert rep["var_rel_err_max"] <= 0.01


def test_jump_continuity_detects_wrong_alpha(monkeypatch):
    # corrupt the corrective-noise weight: the variance check must fail
    import cascadeflow.validate as validate_mod

    original = validate_mod.jump_rollback

    def corrupted(s, n):
        e, alpha = original(s, n)
        return e, alpha * 1.15

    monkeypatch.setattr(validate_mod, "jump_rollback", corrupted)
    rep = validate_mod.check_jump_continuity(
        0.5, cf.ResampleFactors(2, 2, 1), draws=60_000, seed=0, label="bad"
    )
    assert not rep["pass"]
    assert rep["var_rel_err_max"] > 0.01


def test_block_noise_check(schedule):
    rep = check_block_noise(cf.ResampleFactors(2, 2, 3), draws=60_000, seed=0)
    assert rep["pass"]
    assert rep["max_abs_block_sum"] < 1e-9


def test_delta_balance_check():
    rep = check_delta_balance(draws=60_000, seed=0)
    assert rep["pass"]
    assert set(rep["frequencies"]) == {"[0, 0]", "[0, 1]", "[1, 1]"}


def test_endpoint_moments_all_stages(schedule):
    for k in range(3):
        rep = check_endpoint_moments(schedule, k, DeltaPath.full(3), draws=60_000, seed=0)
        assert rep["pass"], rep


def test_rollback_identities(schedule):
    rep = check_rollback_identities(schedule)
    assert rep["pass"]
    assert len(rep["jumps"]) == 4  # two jumps, temporal + spatial variants


def test_run_validation_spatial_schedule_all_pass():
    schedule = cf.build_schedule(
        [
            cf.StageSpec("fine", cf.ResampleFactors(2, 2, 1), frames_per_window=None),
            cf.StageSpec("coarse"),
        ]
    )
    reports = run_validation(schedule, draws=60_000, seed=0)
    assert all(r["pass"] for r in reports), [r for r in reports if not r["pass"]]
    names = [r["check"] for r in reports]
    assert "jump_continuity" in names
    assert "funneling_equivalence" in names
