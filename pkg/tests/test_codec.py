"""
Tests for the latent encoder, per-block quantization and the bitstream format
"""

import logging
from pathlib import Path

import numpy as np
import pytest

from diffcodec.codec import (PREFIX, EncoderNet, QuantizedLatent, StepLadder, base_bits,
                             block_cost_table, dequantize, deserialize, encode_latent, quantize,
                             round_half_away, serialize, step_map)
from diffcodec.entropy import EntropyModel, fit_entropy_model
from diffcodec.errors import BitstreamError
from diffcodec.imaging import ImagePlane

GOLDEN = Path(__file__).parent / "golden"

GOLDEN_CASES = [
    # file, (height, width), channels scales, actions
    ("single_block.pcdc", (16, 16), [1.0], [2]),
    ("four_blocks.pcdc", (32, 32), [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0], [0, 1, 2, 3]),
    ("ragged.pcdc", (60, 40), [1.0, 2.0], [4, 3, 2, 1, 0, 0, 1, 2, 3, 4, 0, 4]),
]


def zero_latent(dims, channels, actions, footprint=4):
    rows, cols = -(-dims[0] // 16), -(-dims[1] // 16)
    symbols = np.zeros((channels, rows * footprint, cols * footprint), dtype=np.int64)
    return QuantizedLatent(symbols=symbols, actions=np.asarray(actions), footprint=footprint)


class TestStepLadder:
    """Quantization step per allocation action"""

    def test_defaults(self):
        ladder = StepLadder()
        assert len(ladder) == 5
        assert ladder.step(0) == 4.0 and ladder.step(4) == 0.25

    @pytest.mark.parametrize("steps", [(1.0, 2.0), (2.0, 2.0), (1.0, 0.0), tuple(2.0 ** -i for i in range(9))])
    def test_invalid_ladders(self, steps):
        with pytest.raises(ValueError):
            StepLadder(steps)


class TestQuantization:
    """Rounding, clamping and step maps"""

    def test_round_half_away_from_zero(self):
        values = np.array([0.5, -0.5, 1.5, -2.5, 0.49, -0.49])
        np.testing.assert_array_equal(round_half_away(values), [1, -1, 2, -3, 0, -0])

    def test_step_map_tiles_blocks(self):
        steps = step_map([0, 1, 2, 3], (2, 2), 2, StepLadder())
        expected = np.kron(np.array([[4.0, 2.0], [1.0, 0.5]]), np.ones((2, 2)))
        np.testing.assert_array_equal(steps, expected)

    def test_step_map_rejects_bad_actions(self):
        with pytest.raises(ValueError):
            step_map([0, 5], (1, 2), 4, StepLadder())
        with pytest.raises(ValueError):
            step_map([0], (1, 2), 4, StepLadder())

    def test_quantize_uses_block_steps(self):
        z = np.full((1, 8, 4), 3.0)
        latent = quantize(z, [0, 4], StepLadder())
        assert latent.grid_shape == (2, 1)
        assert np.all(latent.symbols[0, :4] == 1)
        assert np.all(latent.symbols[0, 4:] == 12)
        np.testing.assert_array_equal(dequantize(latent, StepLadder())[0, :4], np.full((4, 4), 4.0))

    def test_reconstruction_error_bounded_by_half_step(self):
        rng = np.random.default_rng(0)
        z = rng.normal(scale=3.0, size=(4, 8, 8))
        ladder = StepLadder()
        actions = rng.integers(0, len(ladder), size=4)
        latent = quantize(z, actions, ladder)
        error = np.abs(dequantize(latent, ladder) - z)
        assert np.all(error <= step_map(actions, (2, 2), 4, ladder)[None] / 2 + 1e-12)

    def test_clamping_is_counted_and_logged(self, caplog):
        z = np.zeros((1, 4, 4))
        z[0, 0, 0] = 1000.0
        with caplog.at_level(logging.WARNING, logger="diffcodec.codec"):
            latent = quantize(z, [4], StepLadder())
        assert latent.clamped == 1
        assert latent.symbols[0, 0, 0] == 127
        assert "clamped 1 latent symbols" in caplog.text

    def test_untiled_latent_rejected(self):
        with pytest.raises(ValueError):
            quantize(np.zeros((1, 6, 4)), [0], StepLadder())


class TestEncoderNet:
    """Image to latent mapping"""

    def test_latent_shape(self):
        net = EncoderNet(np.random.default_rng(0), latent_channels=3, hidden=(4, 8))
        image = ImagePlane(data=np.random.default_rng(1).uniform(size=(16, 24, 3)))
        assert encode_latent(image, net).shape == (3, 4, 6)

    def test_image_must_be_multiple_of_stride(self):
        net = EncoderNet(np.random.default_rng(0), latent_channels=2, hidden=(4, 4))
        with pytest.raises(ValueError):
            encode_latent(np.zeros((1, 3, 10, 8)), net)


class TestBitAccounting:
    """Side information and block cost tables"""

    def test_base_bits_by_hand(self):
        # 12 header + 16 scale + 6 action + 4 length bytes, checksum byte, 64 slack bits
        assert base_bits(8, 16) == 8 * 38 + 8 + 64

    def test_cost_table_is_monotone_in_step(self):
        rng = np.random.default_rng(2)
        z = rng.normal(scale=3.0, size=(4, 8, 8))
        model = fit_entropy_model(z)
        costs = block_cost_table(z, StepLadder(), model)
        assert costs.shape == (4, 5)
        assert np.all(np.diff(costs, axis=1) >= -1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_stream_never_exceeds_accounted_bits(self, seed):
        rng = np.random.default_rng(seed)
        channels = int(rng.integers(1, 9))
        rows, cols = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        z = rng.normal(scale=rng.uniform(0.5, 6.0), size=(channels, 4 * rows, 4 * cols))
        model = fit_entropy_model(z)
        ladder = StepLadder()
        costs = block_cost_table(z, ladder, model)
        actions = rng.integers(0, len(ladder), size=rows * cols)
        stream = serialize(quantize(z, actions, ladder), (16 * rows, 16 * cols), model)
        accounted = base_bits(channels, rows * cols) + costs[np.arange(rows * cols), actions].sum()
        assert stream.total_bits <= accounted


class TestGoldenBitstreams:
    """Byte-exact layout against committed files"""

    @pytest.mark.parametrize("name,dims,scales,actions", GOLDEN_CASES)
    def test_serialize_matches_golden(self, name, dims, scales, actions):
        latent = zero_latent(dims, len(scales), actions)
        stream = serialize(latent, dims, EntropyModel(scales))
        assert stream.data == (GOLDEN / name).read_bytes()

    @pytest.mark.parametrize("name,dims,scales,actions", GOLDEN_CASES)
    def test_deserialize_golden(self, name, dims, scales, actions):
        decoded = deserialize((GOLDEN / name).read_bytes())
        assert (decoded.height, decoded.width) == dims
        assert decoded.block_size == 16 and decoded.num_actions == 5
        np.testing.assert_array_equal(decoded.actions, actions)
        np.testing.assert_allclose(decoded.model.scales, scales)
        assert not decoded.symbols.any()
        assert decoded.latent.footprint == 4


class TestRoundTrip:
    """serialize followed by deserialize on random configurations"""

    @pytest.mark.parametrize("seed", range(10))
    def test_random_configuration(self, seed):
        rng = np.random.default_rng(100 + seed)
        block_size = int(rng.choice([8, 16]))
        footprint = block_size // 4
        height, width = int(rng.integers(8, 81)), int(rng.integers(8, 81))
        rows, cols = -(-height // block_size), -(-width // block_size)
        channels = int(rng.integers(1, 9))
        num_actions = int(rng.integers(2, 9))
        ladder = StepLadder(tuple(4.0 / 2 ** k for k in range(num_actions)))
        z = rng.normal(scale=rng.uniform(0.5, 8.0), size=(channels, rows * footprint, cols * footprint))
        actions = rng.integers(0, num_actions, size=rows * cols)
        latent = quantize(z, actions, ladder, footprint)
        model = fit_entropy_model(z)

        stream = serialize(latent, (height, width), model, block_size=block_size, num_actions=num_actions)
        decoded = deserialize(stream)
        np.testing.assert_array_equal(decoded.symbols, latent.symbols)
        np.testing.assert_array_equal(decoded.actions, actions)
        assert (decoded.height, decoded.width, decoded.block_size) == (height, width, block_size)
        np.testing.assert_array_equal(decoded.model.scales, model.quantized().scales)
        np.testing.assert_array_equal(dequantize(decoded.latent, ladder), dequantize(latent, ladder))


class TestMalformedStreams:
    """Layout violations raise BitstreamError"""

    def golden(self):
        return bytearray((GOLDEN / "single_block.pcdc").read_bytes())

    def test_bad_magic(self):
        data = self.golden()
        data[0:4] = b"JPEG"
        with pytest.raises(BitstreamError, match="magic"):
            deserialize(bytes(data))

    def test_bad_version(self):
        data = self.golden()
        data[4] = 2
        with pytest.raises(BitstreamError, match="version"):
            deserialize(bytes(data))

    def test_short_header(self):
        with pytest.raises(BitstreamError):
            deserialize(bytes(self.golden()[:PREFIX.size - 1]))

    def test_truncated_side_information(self):
        with pytest.raises(BitstreamError, match="truncated"):
            deserialize(bytes(self.golden()[:15]))

    def test_payload_length_mismatch(self):
        with pytest.raises(BitstreamError, match="payload length"):
            deserialize(bytes(self.golden()) + b"\x00")

    def test_action_outside_space(self):
        data = self.golden()
        data[14] = 0xE0
        with pytest.raises(BitstreamError, match="action"):
            deserialize(bytes(data))

    def test_serialize_rejects_mismatched_model(self):
        latent = zero_latent((16, 16), 2, [0])
        with pytest.raises(BitstreamError):
            serialize(latent, (16, 16), EntropyModel([1.0]))

    def test_serialize_rejects_wrong_grid(self):
        latent = zero_latent((16, 16), 1, [0])
        with pytest.raises(BitstreamError):
            serialize(latent, (32, 16), EntropyModel([1.0]))
