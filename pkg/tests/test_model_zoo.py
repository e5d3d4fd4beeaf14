import numpy as np
import pytest
from hypothesis import given, strategies as st

from splitpipe.cnn_ir import LayerKind, infer_shapes
from splitpipe.errors import InputError, UnknownModel
from splitpipe.model_zoo import (
    IN_DIMS,
    KERNEL_SIZES,
    OUT_CHANNELS,
    OUT_DIMS,
    REFERENCE_MODELS,
    GeneratorConfig,
    build_reference,
    generate_random,
)
from splitpipe.pipeline import enumerate_splits

SPLIT_COUNTS = {"resnet18": 16, "resnet50": 24, "resnet101": 41, "resnet152": 57,
                "mobilenetv2": 24, "vgg16": 41}


@pytest.mark.parametrize("name,count", sorted(SPLIT_COUNTS.items()))
def test_reference_split_counts(name, count):
    assert len(enumerate_splits(build_reference(name))) == count


def test_lenet5_ends_in_ten_way_linear():
    m = build_reference("lenet5")
    last = m.units[-1].layers[-1]
    assert last.kind is LayerKind.LINEAR and last.out_dim == 10
    assert m.units[-1].out_shape.flat == 10
    assert len(enumerate_splits(m)) == 7


def test_reference_names_case_insensitive_and_unknown():
    assert build_reference("ResNet18").name == "resnet18"
    with pytest.raises(UnknownModel):
        build_reference("alexnet")


def test_reference_models_are_inferred():
    for name in REFERENCE_MODELS:
        m = build_reference(name)
        assert m.inferred and infer_shapes(m) == m


def test_residual_units():
    r18 = build_reference("resnet18")
    assert sum(u.has_residual for u in r18.units) == 8
    r50 = build_reference("resnet50")
    assert sum(u.has_residual for u in r50.units) == 16
    mb = build_reference("mobilenetv2")
    assert sum(u.has_residual for u in mb.units) == 10


def test_same_seed_identical_json():
    a = generate_random(GeneratorConfig(seed=1234))
    b = generate_random(GeneratorConfig(seed=1234))
    assert a.to_json() == b.to_json()
    assert a.to_json() != generate_random(GeneratorConfig(seed=1235)).to_json()


def test_thousand_seeds_valid_and_covering():
    kinds = set()
    for seed in range(1000):
        m = generate_random(GeneratorConfig(seed=seed))
        assert 8 <= len(m.units) <= 60
        assert infer_shapes(m) == m
        for u in m.units:
            assert not u.has_residual
            for layer in u.layers:
                kinds.add(layer.kind)
                if layer.kind in (LayerKind.CONV, LayerKind.MAXPOOL, LayerKind.AVGPOOL):
                    assert layer.kernel in KERNEL_SIZES
                if layer.kind is LayerKind.CONV:
                    assert layer.out_channels in OUT_CHANNELS
                if layer.kind is LayerKind.LINEAR:
                    assert layer.out_dim in OUT_DIMS and layer.in_dim in IN_DIMS
    assert kinds == set(LayerKind)


def test_generated_skeleton():
    for seed in range(200):
        m = generate_random(GeneratorConfig(seed=seed))
        kinds = [u.layers[0].kind for u in m.units]
        flat_at = kinds.index(LayerKind.FLATTEN)
        assert kinds.count(LayerKind.FLATTEN) == 1
        assert set(kinds[flat_at + 1:]) <= {LayerKind.LINEAR, LayerKind.RELU}
        assert kinds[-1] is LayerKind.LINEAR
        heights = [u.out_shape.height for u in m.units[:flat_at]]
        assert all(a >= b for a, b in zip([m.input_shape.height] + heights, heights))


def test_config_validation():
    with pytest.raises(InputError):
        GeneratorConfig(min_units=1)
    with pytest.raises(InputError):
        GeneratorConfig(min_units=10, max_units=9)
    with pytest.raises(InputError):
        GeneratorConfig(seed=-1)


def test_unit_count_bounds_respected():
    cfg = dict(min_units=12, max_units=14)
    for seed in range(50):
        assert 12 <= len(generate_random(GeneratorConfig(seed=seed, **cfg)).units) <= 14


@given(seed=st.integers(0, 2**64 - 1))
def test_generator_is_pure(seed):
    a = generate_random(GeneratorConfig(seed=seed))
    assert a.name == f"random-{seed}"
    assert a.to_json() == generate_random(GeneratorConfig(seed=seed)).to_json()
    assert np.all(np.array([u.out_shape.numel for u in a.units]) >= 1)
