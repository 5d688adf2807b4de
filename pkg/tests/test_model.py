"""Network construction, forward contracts, checkpoint format, inference."""

import numpy as np
import pytest

from edgeflow.clicks import Click, encode_clicks, sobel_edge
from edgeflow.model import (
    CHECKPOINT_MAGIC,
    FUSION_VARIANTS,
    Model,
    ModelConfig,
    build_model,
    coarse_forward,
    fine_forward,
    forward_full,
    load_checkpoint,
    predict_step,
    save_checkpoint,
)
from edgeflow.tensor import ShapeError, Tensor

SMALL = ModelConfig(base_channels=8, input_size=(32, 32))


def small_model(seed=0, **overrides):
    cfg = ModelConfig(**{**SMALL.to_dict(), **overrides})
    return build_model(cfg, seed=seed)


def batch_inputs(cfg, seed=0, n=1):
    rng = np.random.default_rng(seed)
    h, w = cfg.input_size
    image = rng.random((n, 3, h, w)).astype(np.float32)
    clicks = [Click(x=w // 3, y=h // 2, polarity="positive", index=1)]
    cm = np.stack([encode_clicks(clicks, h, w) for _ in range(n)]).astype(np.float32)
    prior = np.stack([sobel_edge(image[i].astype(np.float64))
                      for i in range(n)]).astype(np.float32)
    return Tensor(image), Tensor(cm), Tensor(prior)


# ---------------------------------------------------------------------------
# config


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"base_channels": 8, "what_is_this": 1})


def test_config_rejects_bad_variant():
    with pytest.raises(ValueError):
        ModelConfig(fusion_variant="triple_conv")


def test_config_rejects_bad_prior_mode():
    with pytest.raises(ValueError):
        ModelConfig(prior_mode="oracle")


def test_config_roundtrips_through_dict():
    cfg = ModelConfig(base_channels=16, input_size=(48, 64), use_finenet=False)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_interaction_channels_depend_on_edge_flow():
    assert ModelConfig(use_edge_flow=True).interaction_channels == 3
    assert ModelConfig(use_edge_flow=False).interaction_channels == 2


# ---------------------------------------------------------------------------
# construction


def test_same_seed_same_parameters():
    a, b = small_model(7), small_model(7)
    assert list(a.params) == list(b.params)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_different_seeds_differ():
    a, b = small_model(0), small_model(1)
    assert any(not np.array_equal(a.params[k].data, b.params[k].data)
               for k in a.params)


def test_edge_flow_off_removes_flow_parameters():
    m = small_model(use_edge_flow=False)
    assert not any(k.startswith(("flow2.", "flow3.", "istem.")) for k in m.params)


def test_finenet_off_removes_refinement_parameters():
    m = small_model(use_finenet=False)
    assert not any(k.startswith("fine.") for k in m.params)


def test_flow_and_refinement_outputs_start_at_zero():
    m = small_model()
    for name in ("flow2.conv2.w", "flow3.conv2.w", "fine.out.w"):
        np.testing.assert_array_equal(m.params[name].data, 0.0)


def test_both_fusion_variants_build_and_run():
    for variant in FUSION_VARIANTS:
        m = small_model(fusion_variant=variant)
        img, cm, prior = batch_inputs(m.config)
        out = forward_full(m, img, cm, prior)
        assert out.coarse_logits.shape == (1, 1, 32, 32)


# ---------------------------------------------------------------------------
# forward contracts


def test_forward_shapes_and_determinism():
    m = small_model()
    img, cm, prior = batch_inputs(m.config, n=2)
    out1 = forward_full(m, img, cm, prior)
    out2 = forward_full(m, img, cm, prior)
    assert out1.coarse_logits.shape == (2, 1, 32, 32)
    assert out1.edge_logits.shape == (2, 1, 32, 32)
    assert out1.refined_logits.shape == (2, 1, 32, 32)
    np.testing.assert_array_equal(out1.refined_logits.data, out2.refined_logits.data)


def test_refined_equals_coarse_at_initialization():
    # the refinement output conv starts at zero, so the residual is zero
    m = small_model()
    img, cm, prior = batch_inputs(m.config)
    out = forward_full(m, img, cm, prior)
    np.testing.assert_allclose(out.refined_logits.data, out.coarse_logits.data,
                               atol=1e-6)


def test_missing_edge_prior_rejected_when_flow_enabled():
    m = small_model()
    img, cm, _ = batch_inputs(m.config)
    with pytest.raises(ShapeError):
        forward_full(m, img, cm, None)


def test_edge_flow_off_ignores_prior_argument():
    m = small_model(use_edge_flow=False)
    img, cm, _ = batch_inputs(m.config)
    out = forward_full(m, img, cm, None)
    assert out.coarse_logits.shape == (1, 1, 32, 32)


def test_fine_forward_rejected_when_disabled():
    m = small_model(use_finenet=False)
    img, cm, _ = batch_inputs(m.config)
    with pytest.raises(ValueError):
        fine_forward(m, img, cm, Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)))


def test_single_state_forward_matches_batched():
    from edgeflow.clicks import InteractionState
    m = small_model()
    img, cm, prior = batch_inputs(m.config)
    state = InteractionState(image=img.data[0], click_map=cm.data[0],
                             edge_prior=prior.data[0])
    single = coarse_forward(m, state)
    batched = forward_full(m, img, cm, prior)
    np.testing.assert_allclose(single.coarse_logits.data,
                               batched.coarse_logits.data[0], atol=1e-6)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bitwise(tmp_path):
    m = small_model(3)
    path = tmp_path / "model.bin"
    save_checkpoint(m, path)
    loaded = load_checkpoint(path)
    assert loaded.config == m.config
    assert list(loaded.params) == list(m.params)
    for k in m.params:
        np.testing.assert_array_equal(loaded.params[k].data, m.params[k].data)


def test_checkpoint_magic_bytes(tmp_path):
    m = small_model()
    path = tmp_path / "model.bin"
    save_checkpoint(m, path)
    assert path.read_bytes()[:4] == CHECKPOINT_MAGIC


def test_checkpoint_rejects_corrupt_magic(tmp_path):
    m = small_model()
    path = tmp_path / "model.bin"
    save_checkpoint(m, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    m = small_model()
    path = tmp_path / "model.bin"
    save_checkpoint(m, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_checkpoint_forward_identical_after_roundtrip(tmp_path):
    m = small_model(5)
    path = tmp_path / "model.bin"
    save_checkpoint(m, path)
    loaded = load_checkpoint(path)
    img, cm, prior = batch_inputs(m.config)
    a = forward_full(m, img, cm, prior).refined_logits.data
    b = forward_full(loaded, img, cm, prior).refined_logits.data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# inference


def test_predict_step_native_resolution_roundtrip():
    m = small_model()
    rng = np.random.default_rng(0)
    image = rng.random((3, 50, 70))  # native size != network size
    clicks = [Click(x=35, y=25, polarity="positive", index=1)]
    prob, edge = predict_step(m, image, clicks)
    assert prob.shape == (50, 70)
    assert prob.dtype == np.float64
    assert prob.min() >= 0.0 and prob.max() <= 1.0
    assert edge.shape == (50, 70)
    assert set(np.unique(edge)) <= {0.0, 1.0}


def test_predict_step_deterministic():
    m = small_model()
    rng = np.random.default_rng(1)
    image = rng.random((3, 40, 40))
    clicks = [Click(x=20, y=20, polarity="positive", index=1)]
    p1, _ = predict_step(m, image, clicks)
    p2, _ = predict_step(m, image, clicks)
    np.testing.assert_array_equal(p1, p2)


def test_predict_step_uses_previous_prediction():
    m = small_model()
    rng = np.random.default_rng(2)
    image = rng.random((3, 32, 32))
    clicks = [Click(x=16, y=16, polarity="positive", index=1)]
    prob1, _ = predict_step(m, image, clicks)
    prev = (prob1 > 0.5).astype(np.float64)
    prob2, _ = predict_step(m, image, clicks, prev_pred=prev)
    prob3, _ = predict_step(m, image, clicks, prev_pred=np.zeros_like(prev))
    # a non-trivial previous mask must influence the prediction
    if prev.any():
        assert not np.array_equal(prob2, prob3)


def test_predict_step_without_finenet():
    m = small_model(use_finenet=False)
    rng = np.random.default_rng(3)
    image = rng.random((3, 32, 32))
    clicks = [Click(x=10, y=10, polarity="positive", index=1)]
    prob, _ = predict_step(m, image, clicks)
    assert prob.shape == (32, 32)


def test_model_cast_changes_dtype_everywhere():
    m = small_model().cast(np.float64)
    assert all(p.data.dtype == np.float64 for p in m.params.values())
