import numpy as np
import pytest

from smartfreeze import blocks, nn
from smartfreeze.blocks import (
    ModelSpec,
    assemble_stage_model,
    build_output_module,
    extract_block_params,
    grow,
    partition_model,
    reassemble,
)
from smartfreeze.config import ModelConfig, build_model
from smartfreeze.errors import ConfigurationError, ContractError

from conftest import L


def eight_layer_model():
    features = tuple(
        L("conv2d", (c_in, c_out, 3, 1, 1))
        for c_in, c_out in [(1, 4), (4, 4), (4, 8), (8, 8), (8, 8), (8, 8), (8, 8), (8, 8)]
    )
    head = (L("flatten"), L("dense", (8 * 8 * 8, 3)))
    return ModelSpec(features=features, head=head, input_shape=(1, 8, 8), num_classes=3)


def reference_cnn():
    model, boundaries = build_model(ModelConfig())
    return model, boundaries


class TestPartition:
    def test_even_split(self):
        part = partition_model(eight_layer_model(), [2, 4, 6])
        assert part.num_blocks == 4
        assert all(len(b) == 2 for b in part.blocks)
        assert len(part.head) == 2

    def test_empty_boundaries_rejected(self):
        with pytest.raises(ConfigurationError):
            partition_model(eight_layer_model(), [])

    def test_out_of_range_boundary_named(self):
        with pytest.raises(ConfigurationError, match="9"):
            partition_model(eight_layer_model(), [9])

    def test_atomic_conv_relu_not_split(self):
        features = (L("conv2d", (1, 4, 3, 1, 1)), L("relu"), L("conv2d", (4, 4, 3, 1, 1)), L("relu"))
        model = ModelSpec(features=features, head=(L("flatten"), L("dense", (256, 2))),
                          input_shape=(1, 8, 8), num_classes=2)
        with pytest.raises(ConfigurationError, match="atomic"):
            partition_model(model, [1])

    def test_roundtrip_random_model(self, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        assert reassemble(part) == model.layers


class TestOutputModule:
    def test_three_convs_plus_dense_for_first_of_four(self, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        op = build_output_module(part, 1, 4, rng)
        kinds = [l.kind for l in op.layers]
        assert kinds.count("conv2d") == 3
        assert kinds.count("dense") == 1
        assert kinds[-1] == "dense"

    def test_single_conv_for_penultimate_stage(self, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        op = build_output_module(part, 3, 4, rng)
        kinds = [l.kind for l in op.layers]
        assert kinds.count("conv2d") == 1

    def test_stage_T_has_no_output_module(self, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        with pytest.raises(ContractError):
            build_output_module(part, part.num_blocks, 4, rng)

    @pytest.mark.parametrize("t", [1, 2, 3])
    def test_logits_shape(self, t, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        op = build_output_module(part, t, 4, rng)
        stage = assemble_stage_model(part, t, op, [], rng)
        x = rng.normal(size=(5,) + tuple(part.input_shape))
        acts = nn.forward(stage.layers, stage.params, x)
        assert acts[-1].shape == (5, 4)

    def test_synthetic_layer_count_decreases_in_t(self, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        counts = []
        for t in range(1, part.num_blocks):
            op = build_output_module(part, t, 4, rng)
            counts.append(sum(1 for l in op.layers if l.kind == "conv2d"))
        assert counts == sorted(counts, reverse=True)
        assert len(set(counts)) == len(counts)

    def test_deterministic_given_seed(self):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        op1 = build_output_module(part, 2, 4, np.random.default_rng(9))
        op2 = build_output_module(part, 2, 4, np.random.default_rng(9))
        for p1, p2 in zip(op1.params, op2.params):
            if p1 is None:
                continue
            assert np.array_equal(p1["W"], p2["W"])


class TestAssemble:
    def test_stage1_mask(self, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        op = build_output_module(part, 1, 4, rng)
        stage = assemble_stage_model(part, 1, op, [], rng)
        assert stage.trainable_start == 0
        # every parameterized layer is trainable (block 1 + op)
        for i, l in enumerate(stage.layers):
            assert stage.mask[i] == l.parameterized

    def test_stage_T_equals_original_architecture(self, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        stage = assemble_stage_model(part, part.num_blocks, None, [], rng)
        assert stage.layers == model.layers

    def test_trainable_param_count_oracle(self, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        op = build_output_module(part, 2, 4, rng)
        stage = assemble_stage_model(part, 2, op, [], rng)
        got = sum(
            stage.params[i][name].size
            for (i, name) in stage.trainable_keys()
        )
        # independent count: block 2 layers + op layers, by hand per layer
        expect = 0
        for l in list(part.blocks[1]) + list(op.layers):
            if l.kind == "conv2d":
                ci, co, k, _, _ = l.dims
                expect += co * ci * k * k + co
            elif l.kind == "dense":
                fi, fo = l.dims
                expect += fi * fo + fo
        assert got == expect

    def test_wrong_stage_op_module_rejected(self, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        op = build_output_module(part, 1, 4, rng)
        with pytest.raises(ContractError):
            assemble_stage_model(part, 2, op, [], rng)


class TestGrow:
    def test_carry_over_bit_identical(self, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        op = build_output_module(part, 1, 4, rng)
        stage1 = assemble_stage_model(part, 1, op, [], rng)
        block1 = [
            {k: v.copy() for k, v in p.items()} if p is not None else None
            for p in stage1.params[: stage1.op_start]
        ]
        stage2 = grow(stage1, part, rng)
        assert stage2.stage == 2
        for before, after in zip(block1, stage2.params):
            if before is None:
                assert after is None
                continue
            for k in before:
                assert np.array_equal(before[k], after[k])

    def test_grow_to_full_architecture(self, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        op = build_output_module(part, 1, 4, rng)
        stage = assemble_stage_model(part, 1, op, [], rng)
        for _ in range(part.num_blocks - 1):
            stage = grow(stage, part, rng)
        assert stage.layers == model.layers
        with pytest.raises(ContractError):
            grow(stage, part, rng)

    def test_param_count_after_grow(self, rng):
        model, boundaries = reference_cnn()
        part = partition_model(model, boundaries)
        op = build_output_module(part, 1, 4, rng)
        stage1 = assemble_stage_model(part, 1, op, [], rng)
        stage2 = grow(stage1, part, rng)
        total = sum(p["W"].size + p["b"].size for p in stage2.params if p is not None)
        op2_layers = stage2.layers[stage2.op_start :]
        expect = sum(
            nn.param_count(l)
            for l in list(part.blocks[0]) + list(part.blocks[1]) + op2_layers
        )
        assert total == expect


def test_mlp_preset_output_module_uses_dense_stand_ins(rng):
    model, boundaries = build_model(
        ModelConfig(preset="mlp", input_shape=(16,), hidden=(12, 8), num_classes=3)
    )
    part = partition_model(model, boundaries)
    op = build_output_module(part, 1, 3, rng)
    kinds = [l.kind for l in op.layers]
    assert "conv2d" not in kinds
    stage = assemble_stage_model(part, 1, op, [], rng)
    x = rng.normal(size=(4, 16))
    assert nn.forward(stage.layers, stage.params, x)[-1].shape == (4, 3)
