import numpy as np
import pytest

from zeroguide import tensorio
from zeroguide.encoders import (BackendUnavailable, EncoderSession, PatchFeatureRequest, ReplayBackend,
                                ShapeMismatch, identity_hook, image_digest, open_backend)
from zeroguide.encoders.vit import VisionTransformer, random_vit_params


@pytest.fixture
def small_replay(rng):
    image = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    feats = rng.normal(size=(4, 4, 8)).astype(np.float32)
    tensors = {f"patch/{image_digest(image)}": feats, "text/cat": np.ones(4), "sbert/cat": np.arange(1.0, 5.0)}
    return ReplayBackend(tensors), image, feats


def test_replay_patch_features_are_stable(small_replay):
    backend, image, feats = small_replay
    req = PatchFeatureRequest(image=image, grid=(4, 4))
    a = backend.extract_patch_features(req)
    b = backend.extract_patch_features(req)
    assert a.grid == (4, 4) and a.channels == 8 and a.data.shape == (16, 8)
    np.testing.assert_array_equal(a.data, feats.reshape(16, 8))
    assert a.data.tobytes() == b.data.tobytes()


def test_replay_grid_mismatch(small_replay):
    backend, image, _ = small_replay
    with pytest.raises(ShapeMismatch):
        backend.extract_patch_features(PatchFeatureRequest(image=image, grid=(8, 8)))


def test_replay_unknown_image(small_replay):
    backend, image, _ = small_replay
    with pytest.raises(BackendUnavailable, match="patch/"):
        backend.extract_patch_features(PatchFeatureRequest(image=255 - image, grid=(4, 4)))


def test_text_lookup_and_missing_key_named(small_replay):
    backend, _, _ = small_replay
    np.testing.assert_array_equal(backend.embed_text("cat"), backend.embed_text("cat"))
    with pytest.raises(BackendUnavailable, match="text/airplane"):
        backend.embed_text("airplane")
    with pytest.raises(BackendUnavailable, match="sbert/dog"):
        backend.embed_sentence_pairwise("dog")
    with pytest.raises(ValueError):
        backend.embed_text("")


def test_sentence_self_similarity(small_replay):
    backend, _, _ = small_replay
    v = backend.embed_sentence_pairwise("cat")
    w = backend.embed_sentence_pairwise("cat")
    assert np.array_equal(v, w)
    assert v @ w / (np.linalg.norm(v) * np.linalg.norm(w)) == pytest.approx(1.0, abs=1e-12)


def test_missing_replay_file(tmp_path):
    with pytest.raises(BackendUnavailable):
        open_backend(f"replay:{tmp_path / 'none.zgtr'}")
    with pytest.raises(ValueError):
        open_backend("bogus")


def test_backend_without_encoder_weights(small_replay):
    backend, image, _ = small_replay
    with pytest.raises(BackendUnavailable):
        backend.run_joint_encoder(image)


def test_identity_hook_matches_native_embedding(replay, index):
    for image_id in index.ids:
        image = index.load_image(image_id)
        hooked = replay.run_joint_encoder(image, identity_hook, (1, replay.num_layers))
        np.testing.assert_allclose(hooked, replay.image_embedding(image), atol=1e-5, rtol=0)


def test_hooked_run_is_bitwise_stable(replay, index):
    image = index.load_image(index.ids[0])

    def halve(state, attn):
        return attn * 0.5

    a = replay.run_joint_encoder(image, halve, (21, 24))
    b = replay.run_joint_encoder(image, halve, (21, 24))
    assert a.tobytes() == b.tobytes()
    assert not np.allclose(a, replay.image_embedding(image))


def test_hook_sees_global_token_first_and_layer_range(replay, index):
    image = index.load_image(index.ids[0])
    seen = []

    def spy(state, attn):
        seen.append(state.layer)
        assert state.tokens == replay.grid[0] * replay.grid[1] + 1
        assert state.q.shape == state.k.shape == state.v.shape == attn.shape
        return attn

    replay.run_joint_encoder(image, spy, (21, 24))
    assert seen == [21, 22, 23, 24]


def test_wrong_token_count_fails_before_next_layer(replay, index):
    image = index.load_image(index.ids[0])
    calls = []

    def bad(state, attn):
        calls.append(state.layer)
        return attn[:, :-1]

    with pytest.raises(ShapeMismatch, match="layer 21"):
        replay.run_joint_encoder(image, bad, (21, 24))
    assert calls == [21]


def test_session_range_validation(replay):
    EncoderSession(replay, 21, 24)
    with pytest.raises(ValueError):
        EncoderSession(replay, 0, 3)
    with pytest.raises(ValueError):
        EncoderSession(replay, 22, 21)
    with pytest.raises(ValueError):
        EncoderSession(replay, 21, 25)


def test_vit_parameters_survive_container(tmp_path, rng):
    params = random_vit_params(rng, image_size=16, patch_size=8, width=8, heads=2, layers=3, mlp=8, embed_dim=4)
    tensorio.save(tmp_path / "w.zgtr", params)
    vit = VisionTransformer(tensorio.load(tmp_path / "w.zgtr"))
    assert vit.num_layers == 3 and vit.grid == (2, 2) and vit.embed_dim == 4
    image = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    np.testing.assert_allclose(vit.forward(image), VisionTransformer(params).forward(image))
