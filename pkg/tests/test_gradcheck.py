import numpy as np
import pytest

from meshsplat.gradcheck import (
    FLOOR,
    check_array,
    check_stage1,
    check_stage2,
    relative_error,
    run_gradcheck,
    sample_counts,
    stage1_case,
    stage2_case,
)
from meshsplat.pipeline import stage2_loss
from meshsplat.renderer import cutoff_guard_mask


def test_relative_error_uses_a_floor():
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
    assert relative_error(0.0, FLOOR / 10) == pytest.approx(0.1)
    assert relative_error(0.0, 0.0) == 0.0


def test_check_array_on_a_quadratic(rng):
    param = rng.normal(size=(3, 4))
    target = rng.normal(size=(3, 4))

    def evaluate():
        return float(np.sum((param - target) ** 2)), None

    good = check_array("quad", param, 2.0 * (param - target), evaluate, rng, samples=12)
    assert good.passed and good.checked == 12 and good.skipped == 0
    bad = check_array("quad", param, 3.0 * (param - target), evaluate, rng, samples=4)
    assert not bad.passed


def test_check_array_skips_cutoff_crossings(rng):
    param = np.array([0.0, 5.0])

    def evaluate():
        return float(np.sum(param)), bool(param[0] > 0.0)

    result = check_array("step", param, np.ones(2), evaluate, rng, samples=2)
    assert result.skipped == 1
    assert result.checked == 1
    assert result.passed


def test_check_array_covers_every_entry_by_default(rng):
    param = rng.normal(size=(3, 5))

    def evaluate():
        return float(np.sum(np.exp(param))), None

    result = check_array("exp", param, np.exp(param), evaluate, rng)
    assert result.checked == param.size
    assert result.passed


def test_sample_counts_add_up_to_the_records():
    model, frames, config = stage2_case(seed=0)
    _, _, output = stage2_loss(model, frames, 1, config, "static", with_grad=False)
    counts = sample_counts(output)
    assert counts.shape == (16, 16)
    assert counts.sum() == sum(len(r.surfel) for r in output.records)
    assert np.all(counts[cutoff_guard_mask(output)] > 0)


def test_stage1_gradients():
    results = check_stage1(seed=0, samples=1)
    assert results
    assert all(r.passed for r in results), [r.name for r in results if not r.passed]


def test_stage2_gradients():
    results = check_stage2(seed=0, samples=2)
    names = {r.name for r in results}
    assert {"stage2/tree.opacity_logits", "stage2/deformation.anchor_logits", "stage2/decoder.qs.0"} <= names
    assert all(r.passed for r in results), [r.name for r in results if not r.passed]
    assert sum(r.checked for r in results) > len(results)


@pytest.mark.slow
def test_full_gradcheck():
    results = run_gradcheck(seed=1)
    assert all(r.passed for r in results), [r.name for r in results if not r.passed]
    _, _, deformation = stage1_case(seed=1)
    model, _, _ = stage2_case(seed=1)
    sizes = {f"stage1/{k}": v.size for k, v in deformation.named_parameters().items()}
    sizes.update({f"stage2/{k}": v.size for k, v in model.named_parameters().items()})
    assert {r.name: r.checked + r.skipped for r in results} == sizes
    assert sum(r.skipped for r in results) < 0.05 * sum(sizes.values())
