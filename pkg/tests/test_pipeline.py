import numpy as np
import pytest
from hypothesis import given, strategies as st

from splitpipe.cnn_ir import KINDS, AtomicUnit, CnnModel, TensorShape, infer_shapes, relu
from splitpipe.cost_model import DeviceProfile, KindCoeffs, LinkProfile, unit_latencies
from splitpipe.errors import IndexOutOfRange, InvalidParam, LengthMismatch
from splitpipe.model_zoo import GeneratorConfig, build_reference, generate_random, zoo
from splitpipe.pipeline import (
    TransferPath,
    enumerate_splits,
    optimal_split,
    prefix_sums,
    simulate_pipeline,
    simulate_stages,
    speedup_report,
    split_latency,
    stage_curve,
    stage_curve_from_units,
    suffix_sums,
)

from conftest import TOY_DPU_US, TOY_GPU_US, TOY_TRANSFER_US, US, random_instance

DIRECT, INDIRECT = TransferPath.DIRECT, TransferPath.INDIRECT


def toy_curve(path):
    return stage_curve_from_units(TOY_DPU_US, TOY_GPU_US, TOY_TRANSFER_US, path)


# -- toy pipeline: hand enumeration -------------------------------------------

def test_toy_k1():
    p = toy_curve(DIRECT).plan(1)
    assert (p.stage1, p.stage2, p.steady_latency) == (12.0, 20.0, 20.0)
    assert p.fill == 12.0


def test_toy_k0_and_k3():
    c = toy_curve(DIRECT)
    assert c.plan(0).steady_latency == 25.0 and c.plan(0).stage1 == 4.0
    assert c.plan(3).steady_latency == 60.5 and c.plan(3).stage2 == 0.0


def test_toy_indirect_k1():
    p = toy_curve(INDIRECT).plan(1)
    assert p.stage2 == 22.0 and p.steady_latency == 22.0


def test_toy_optimum_and_speedups():
    c = toy_curve(DIRECT)
    best = c.plan(c.best_index())
    assert best.split_index == 1 and best.steady_latency == 20.0
    assert best.speedup_over_dpu == 3.025 and best.speedup_over_gpu == 1.25
    ind = toy_curve(INDIRECT)
    assert ind.plan(ind.best_index()).steady_latency == 22.0


def test_toy_through_model_api(toy):
    model, dpu, gpu, link = toy
    plan = optimal_split(model, dpu, gpu, link, DIRECT)
    assert plan.split_index == 1
    assert plan.steady_latency == pytest.approx(20 * US, rel=1e-12)
    for k, t in enumerate(TOY_TRANSFER_US):
        assert split_latency(model, dpu, gpu, link, k).stage1 == pytest.approx(
            sum(TOY_DPU_US[:k]) * US + t * US, rel=1e-12)
    assert optimal_split(model, dpu, gpu, link, INDIRECT).steady_latency == pytest.approx(
        22 * US, rel=1e-12)


def test_split_latency_range(toy):
    model, dpu, gpu, link = toy
    with pytest.raises(IndexOutOfRange):
        split_latency(model, dpu, gpu, link, 4)


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        stage_curve_from_units([1.0], [1.0, 2.0], [0.0, 0.0], DIRECT)


def test_tie_breaks_to_smallest_split():
    c = stage_curve_from_units([1.0, 1.0], [1.0, 1.0], [0.0, 0.0, 0.0], DIRECT)
    # steady = [2, 1, 2]
    assert c.best_index() == 1
    flat = stage_curve_from_units([0.0, 0.0], [0.0, 0.0], [1.0, 1.0, 1.0], DIRECT)
    assert flat.best_index() == 0


def test_enumerate_splits():
    assert len(enumerate_splits(build_reference("resnet18"))) == 16
    assert len(enumerate_splits(build_reference("vgg16"))) == 41
    one = infer_shapes(CnnModel([AtomicUnit([relu()])], TensorShape.spatial(1, 2, 2)))
    assert enumerate_splits(one) == [0, 1]


def test_prefix_suffix_sums():
    np.testing.assert_array_equal(prefix_sums([1, 2, 3]), [0, 1, 3, 6])
    np.testing.assert_array_equal(suffix_sums([1, 2, 3]), [6, 5, 3, 0])


# -- event simulation ----------------------------------------------------------

def test_sim_toy_steady(toy):
    model, dpu, gpu, link = toy
    s = simulate_pipeline(model, dpu, gpu, link, 1, DIRECT, 1000, 4)
    assert s.per_image_steady == pytest.approx(20 * US, rel=0.01)


def test_sim_single_image_is_sum():
    s = simulate_stages(12.0, 20.0, 1, 4)
    assert s.total == 32.0 and s.per_image_steady == 32.0


def test_sim_capacity_does_not_change_steady():
    for s1, s2 in [(12.0, 20.0), (20.0, 12.0), (5.0, 5.0)]:
        a = simulate_stages(s1, s2, 1000, 1)
        b = simulate_stages(s1, s2, 1000, 64)
        assert a.per_image_steady == b.per_image_steady == max(s1, s2)


def test_sim_queue_bounded():
    s = simulate_stages(1.0, 10.0, 200, 3)
    assert s.max_queue_depth <= 3
    assert s.total == pytest.approx(1.0 + 200 * 10.0)


def test_sim_invalid_params():
    with pytest.raises(InvalidParam):
        simulate_stages(1.0, 1.0, 0, 4)
    with pytest.raises(InvalidParam):
        simulate_stages(1.0, 1.0, 10, 0)


@given(s1=st.floats(1e-6, 1e-2), s2=st.floats(1e-6, 1e-2), cap=st.integers(1, 8),
       n=st.integers(10, 300))
def test_sim_matches_max_rule(s1, s2, cap, n):
    s = simulate_stages(s1, s2, n, cap)
    assert s.per_image_steady == pytest.approx(max(s1, s2), rel=1e-9)
    # fill + (n - 1) bottleneck periods
    assert s.total == pytest.approx(s1 + s2 + (n - 1) * max(s1, s2), rel=1e-9)


# -- properties ----------------------------------------------------------------

def endpoint_baselines(model, dpu, gpu, link, path):
    """Single-device runs built from scratch: the whole model on one side."""
    t_in = link.fixed_overhead + model.input_shape.numel / link.bandwidth
    t_out = link.fixed_overhead + (model.units[-1].out_shape.numel + 4) / link.bandwidth
    gpu_total = 0.0
    for lat in reversed(list(unit_latencies(gpu, model))):  # suffix accumulates last-first
        gpu_total += lat
    dpu_total = 0.0
    for lat in unit_latencies(dpu, model):
        dpu_total += lat
    gpu_stage2 = gpu_total + (t_in if path is INDIRECT else 0.0)
    dpu_stage2 = t_out if path is INDIRECT else 0.0
    return max(t_in, gpu_stage2), max(dpu_total + t_out, dpu_stage2)


@given(seed=st.integers(0, 10_000), path=st.sampled_from([DIRECT, INDIRECT]))
def test_endpoint_identity(seed, path):
    model, dpu, gpu, link = random_instance(seed)
    c = stage_curve(model, dpu, gpu, link, path)
    gpu_only, dpu_only = endpoint_baselines(model, dpu, gpu, link, path)
    assert c.steady[0] == gpu_only
    assert c.steady[-1] == dpu_only
    best = c.plan(c.best_index())
    assert best.speedup_over_gpu == gpu_only / best.steady_latency
    assert best.speedup_over_dpu == dpu_only / best.steady_latency


@given(seed=st.integers(0, 10_000))
def test_path_ordering_and_monotone_stages(seed):
    model, dpu, gpu, link = random_instance(seed)
    d = stage_curve(model, dpu, gpu, link, DIRECT)
    i = stage_curve(model, dpu, gpu, link, INDIRECT)
    assert np.all(i.steady >= d.steady)
    assert np.all(np.diff(prefix_sums(unit_latencies(dpu, model))) >= 0)
    assert np.all(np.diff(suffix_sums(unit_latencies(gpu, model))) <= 0)
    pd = d.plan(d.best_index())
    pi = i.plan(i.best_index())
    assert pi.speedup_over_dpu <= pd.speedup_over_dpu


@given(seed=st.integers(0, 10_000), factor=st.sampled_from([0.5, 2.0, 4.0, 0.125]))
def test_argmin_scale_invariance(seed, factor):
    model, dpu, gpu, link = random_instance(seed)
    k = optimal_split(model, dpu, gpu, link).split_index
    k2 = optimal_split(model, dpu.scaled(factor), gpu.scaled(factor), link.scaled(factor))
    assert k2.split_index == k


@given(seed=st.integers(0, 10_000))
def test_bottleneck_bound(seed):
    model, dpu, gpu, link = random_instance(seed)
    c = stage_curve(model, dpu, gpu, link, DIRECT)
    pre = prefix_sums(unit_latencies(dpu, model))
    suf = suffix_sums(unit_latencies(gpu, model))
    assert np.all(c.steady >= np.maximum(pre, suf))


# -- reports ----------------------------------------------------------------

def test_uniform_balanced_speedup_two():
    model = infer_shapes(CnnModel([AtomicUnit([relu()], name=f"r{i}") for i in range(8)],
                                  TensorShape.spatial(1, 4, 4), "uniform"))
    same = DeviceProfile("u", {k: KindCoeffs(gamma=1e-5) for k in KINDS})
    free = LinkProfile(1e30, 0.0)
    plan = optimal_split(model, same, same, free)
    assert plan.split_index == 4
    assert plan.speedup_over_gpu == pytest.approx(2.0, rel=1e-12)
    assert plan.speedup_over_dpu == pytest.approx(2.0, rel=1e-12)


def test_report_schema_and_rows(profiles):
    dpu, gpu, link = profiles
    models = zoo()
    rep = speedup_report(models, dpu, gpu, link)
    lines = rep.speedups_csv().splitlines()
    assert lines[0] == "model,path,speedup_over_dpu,speedup_over_gpu,layer_index"
    assert len(lines) == 1 + 2 * len(models)
    curve = rep.curve_csv("vgg16", DIRECT).splitlines()
    assert curve[0] == "split_index,stage1_s,stage2_s,steady_s"
    assert len(curve) == 1 + 41


def test_zoo_resnets_interior(profiles):
    dpu, gpu, link = profiles
    for name in ("resnet18", "resnet50", "resnet101", "resnet152", "vgg16"):
        m = build_reference(name)
        k = optimal_split(m, dpu, gpu, link).split_index
        assert 0 < k < len(m.units), name


def test_lenet_speedup_near_one(profiles):
    dpu, gpu, link = profiles
    plan = optimal_split(build_reference("lenet5"), dpu, gpu, link)
    assert 1.0 <= plan.speedup_over_dpu <= 1.1


def test_report_rows_follow_input_order(profiles):
    dpu, gpu, link = profiles
    models = [build_reference("resnet18"), build_reference("lenet5")]
    rep = speedup_report(models, dpu, gpu, link)
    assert [(r.model, r.path) for r in rep.rows] == [
        ("resnet18", DIRECT), ("resnet18", INDIRECT), ("lenet5", DIRECT), ("lenet5", INDIRECT)]
