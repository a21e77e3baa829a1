import io
import json

import numpy as np
import pytest

from repspk.blocks import InitPolicy
from repspk.network import build_model, embed, fuse_model
from repspk.serialization import (
    FormatError,
    decode_weights,
    encode_weights,
    features_to_tensor,
    load_model,
    model_tensors,
    read_embeddings,
    read_features,
    read_manifest,
    read_trial_list,
    read_weights,
    save_model,
    write_embeddings,
    write_features,
    write_weights,
)


class TestWeightFile:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        tensors = {
            "a": rng.normal(size=(3, 2, 3, 3)),
            "b.bias": rng.normal(size=7).astype(np.float32),
            "scalar": np.array(1.5),
            "edge": np.array([0.0, -0.0, np.finfo(float).tiny, 1e308]),
        }
        write_weights(tmp_path / "w.rspk", tensors)
        back = read_weights(tmp_path / "w.rspk")
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].dtype == tensors[k].dtype
            assert back[k].shape == tensors[k].shape
            assert back[k].tobytes() == tensors[k].tobytes()

    def test_trailing_bytes(self, rng):
        data = encode_weights({"x": rng.normal(size=4)})
        with pytest.raises(FormatError, match="trailing"):
            decode_weights(data + b"\0")

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_weights(b"XXXX" + bytes(8))

    @pytest.mark.parametrize("cut", [2, 10, 13, 20, -1])
    def test_truncation(self, rng, cut):
        data = encode_weights({"x": rng.normal(size=(2, 3))})
        with pytest.raises(FormatError):
            decode_weights(data[:cut])

    def test_unsupported_dtype(self):
        with pytest.raises(FormatError):
            encode_weights({"i": np.arange(3)})

    def test_empty(self):
        assert decode_weights(encode_weights({})) == {}


class TestFeatureFile:
    def test_round_trip(self, tmp_path, rng):
        frames = rng.normal(size=(37, 16)).astype(np.float32)
        write_features(tmp_path / "u.feat", frames)
        np.testing.assert_array_equal(read_features(tmp_path / "u.feat"), frames)

    def test_tensor_layout(self, rng):
        frames = rng.normal(size=(5, 3)).astype(np.float32)
        x = features_to_tensor(frames)
        assert x.shape == (1, 1, 3, 5)
        assert x[0, 0, 2, 4] == frames[4, 2]

    def test_empty_rejected(self, tmp_path):
        write_features(tmp_path / "e.feat", np.zeros((0, 16)))
        with pytest.raises(FormatError, match="empty"):
            read_features(tmp_path / "e.feat")

    def test_size_mismatch(self, tmp_path, rng):
        write_features(tmp_path / "u.feat", rng.normal(size=(4, 4)))
        path = tmp_path / "u.feat"
        path.write_bytes(path.read_bytes() + b"\0\0\0\0")
        with pytest.raises(FormatError):
            read_features(path)

    def test_not_a_feature_file(self, tmp_path):
        (tmp_path / "x.feat").write_bytes(b"hello")
        with pytest.raises(FormatError):
            read_features(tmp_path / "x.feat")


class TestModelFiles:
    @pytest.mark.parametrize("variant", ["repvgg", "rsba", "rsbb", "var_e"])
    def test_train_round_trip(self, tmp_path, variant):
        model = build_model("toy", variant, seed=2, init=InitPolicy(random_bn=True))
        loaded = load_model(save_model(model, tmp_path))
        before, after = model_tensors(model), model_tensors(loaded)
        assert list(before) == list(after)
        for k in before:
            assert before[k].tobytes() == after[k].tobytes()

    def test_fused_round_trip_embeds_identically(self, tmp_path, rng):
        fused = fuse_model(build_model("toy", "rsba", seed=1))
        loaded = load_model(save_model(fused, tmp_path, "fused"))
        assert loaded.state == "fused"
        x = rng.normal(size=(1, 1, 16, 40))
        assert embed(fused, x, "fused").tobytes() == embed(loaded, x, "fused").tobytes()

    def test_manifest_fields(self, tmp_path):
        model = build_model("toy", "var_b", seed=9)
        manifest = read_manifest(save_model(model, tmp_path))
        assert manifest["arch"] == "TOY" and manifest["variant"] == "var_b" and manifest["state"] == "train"
        assert manifest["seed"] == 9
        assert len(manifest["blocks"]) == model.num_blocks
        assert manifest["param_count"] == model.num_params()

    def test_fused_param_count_matches_index(self, tmp_path):
        path = save_model(fuse_model(build_model("toy", "repvgg")), tmp_path, "fused")
        manifest = read_manifest(path)
        assert manifest["param_count"] == sum(int(np.prod(t["shape"])) for t in manifest["tensors"])
        assert all(t["name"].endswith((".weight", ".bias")) for t in manifest["tensors"])

    def test_index_mismatch_rejected(self, tmp_path):
        path = save_model(build_model("toy", "repvgg"), tmp_path)
        manifest = json.loads(path.read_text())
        manifest["tensors"][0]["shape"] = [1]
        path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_model(path)

    def test_missing_tensor_rejected(self, tmp_path):
        path = save_model(build_model("toy", "repvgg"), tmp_path)
        tensors = read_weights(tmp_path / "model.rspk")
        tensors.pop("embed.bias")
        write_weights(tmp_path / "model.rspk", tensors)
        with pytest.raises(FormatError):
            load_model(path)

    def test_precision_cast(self, tmp_path):
        loaded = load_model(save_model(build_model("toy", "repvgg"), tmp_path), precision="single")
        assert loaded.embed_weight.dtype == np.float32
        assert loaded.blocks[0].branches[0].conv.weight.dtype == np.float32

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        with pytest.raises(FormatError):
            read_manifest(tmp_path / "m.json")
        (tmp_path / "m.json").write_text("{}")
        with pytest.raises(FormatError):
            read_manifest(tmp_path / "m.json")


class TestTextTables:
    def test_embeddings_round_trip(self, tmp_path, rng):
        rows = [("utt1", rng.normal(size=4)), ("utt2", rng.normal(size=4))]
        buf = io.StringIO()
        write_embeddings(buf, rows)
        (tmp_path / "e.txt").write_text(buf.getvalue())
        table = read_embeddings(tmp_path / "e.txt")
        assert list(table) == ["utt1", "utt2"]
        np.testing.assert_allclose(table["utt1"], rows[0][1], rtol=1e-8)

    def test_trial_labels(self, tmp_path):
        (tmp_path / "t.txt").write_text("1\ta\tb\nnontarget\ta\tc\ntarget\tb\tc\n0\tc\ta\n")
        assert [t[0] for t in read_trial_list(tmp_path / "t.txt")] == [True, False, True, False]

    def test_trial_bad_line(self, tmp_path):
        (tmp_path / "t.txt").write_text("1 a b\n")
        with pytest.raises(FormatError):
            read_trial_list(tmp_path / "t.txt")
