"""Model container: round trip, quantization, and corruption detection."""

import numpy as np
import pytest

from kidtts import checkpoint, flowdec, speechcodec, tokenlm
from kidtts.errors import DataError


def build_ckpt(language_filter=None, seed=0):
    lm_cfg = tokenlm.LMConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16,
                              speech_vocab=5, max_seq=64, seed=seed)
    flow_cfg = flowdec.FlowConfig(n_mels=4, hidden=8, layers=2, seed=seed)
    rng = np.random.default_rng(seed)
    cb = speechcodec.Codebook(centroids=rng.standard_normal((4, 4)))
    return checkpoint.Checkpoint(
        lm_config=lm_cfg,
        lm_params=tokenlm.init_params(lm_cfg),
        flow_config=flow_cfg,
        flow_params=flowdec.init_params(flow_cfg),
        codebook=cb,
        corpus_digest="d" * 64,
        epoch=3,
        val_loss=1.25,
        language_filter=language_filter,
    )


def quantized(arr):
    return arr.astype("<f4").astype(np.float64)


class TestRoundTrip:
    def test_tensors_survive_as_float32(self, tmp_path):
        ckpt = build_ckpt()
        p = tmp_path / "m.ckpt"
        checkpoint.save(ckpt, p)
        back = checkpoint.load(p)
        assert sorted(back.lm_params) == sorted(ckpt.lm_params)
        for k, v in ckpt.lm_params.items():
            np.testing.assert_array_equal(back.lm_params[k], quantized(v))
        for k, v in ckpt.flow_params.items():
            np.testing.assert_array_equal(back.flow_params[k], quantized(v))
        np.testing.assert_array_equal(back.codebook.centroids,
                                      quantized(ckpt.codebook.centroids))

    def test_metadata_fields_preserved(self, tmp_path):
        for filt in (None, "zh"):
            ckpt = build_ckpt(language_filter=filt)
            p = tmp_path / f"{filt}.ckpt"
            checkpoint.save(ckpt, p)
            back = checkpoint.load(p)
            assert back.language_filter == filt
            assert back.epoch == 3
            assert back.val_loss == 1.25
            assert back.corpus_digest == "d" * 64
            assert back.lm_config == ckpt.lm_config
            assert back.flow_config == ckpt.flow_config

    def test_serialization_is_canonical(self, tmp_path):
        ckpt = build_ckpt()
        a = tmp_path / "a.ckpt"
        b = tmp_path / "b.ckpt"
        checkpoint.save(ckpt, a)
        checkpoint.save(checkpoint.load(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_no_temp_file_left_behind(self, tmp_path):
        p = tmp_path / "m.ckpt"
        checkpoint.save(build_ckpt(), p)
        assert [f.name for f in tmp_path.iterdir()] == ["m.ckpt"]


class TestFailureModes:
    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="checkpoint not found"):
            checkpoint.load(tmp_path / "nope.ckpt")

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(DataError, match="bad magic"):
            checkpoint.load(p)

    def test_unsupported_format_version(self, tmp_path):
        p = tmp_path / "m.ckpt"
        checkpoint.save(build_ckpt(), p)
        raw = bytearray(p.read_bytes())
        raw[8:12] = (99).to_bytes(4, "little")
        p.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="unsupported format version 99"):
            checkpoint.load(p)

    def test_truncated_file(self, tmp_path):
        p = tmp_path / "m.ckpt"
        checkpoint.save(build_ckpt(), p)
        p.write_bytes(p.read_bytes()[:-40])
        with pytest.raises(DataError, match="truncated checkpoint"):
            checkpoint.load(p)

    def test_flipped_payload_byte_fails_integrity_check(self, tmp_path):
        p = tmp_path / "m.ckpt"
        checkpoint.save(build_ckpt(), p)
        raw = bytearray(p.read_bytes())
        raw[-40] ^= 0xFF  # inside the last tensor payload, before the digest
        p.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="integrity digest mismatch"):
            checkpoint.load(p)

    def test_non_finite_validation_loss_rejected(self):
        with pytest.raises(DataError, match="finite"):
            build_ckpt().__class__(
                **{**build_ckpt().__dict__, "val_loss": float("nan")})
