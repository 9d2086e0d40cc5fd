import numpy as np
import pytest

from birc import bitstream as bs
from birc import codec
from birc.codec import (CodeSettings, SignalDataset, compress, decompress, load_signal,
                        patch_merge, patch_split, prior_mean_reconstruction, psnr, save_signal)
from birc.modelstore import load_model, model_hash_u64, save_model
from birc.posenc import ConfigError
from birc.trainer import NATS_PER_BIT, TrainConfig, train
from conftest import make_model, smooth_signals


# --- bit packing / header ---

def test_bitwriter_reader_round_trip():
    w = bs.BitWriter()
    vals = [(5, 3), (1023, 10), (0, 1), (65535, 16), (7, 5)]
    for v, n in vals:
        w.write(v, n)
    r = bs.BitReader(w.getvalue())
    for v, n in vals:
        assert r.read(v.bit_length() if False else n) == v


def test_bitreader_truncated():
    r = bs.BitReader(b"\x01")
    r.read(8)
    with pytest.raises(bs.CorruptStreamError):
        r.read(1)


def _dummy_stream():
    layouts = [bs.LevelLayout(2, 5, (3, 2)), bs.LevelLayout(1, 4, (2, 2))]
    indices = [np.array([[7, 1], [2, 3]]), np.array([[4, 5]])]
    return bs.Bitstream(model_hash=0xDEADBEEF, modality="image", out_dim=1,
                        signal_shape=(8, 8), patched=True, patch_shape=(4, 8),
                        levels=2, group_shape=(1, 1), norm_lo=0.0, norm_hi=255.0,
                        sample_rate=0, global_seed=42, block_bits=4, flags=1,
                        layouts=layouts, indices=indices)


def test_header_round_trip():
    stream = _dummy_stream()
    back = bs.parse(stream.to_bytes())
    assert back.model_hash == stream.model_hash
    assert back.signal_shape == (8, 8)
    assert back.patch_shape == (4, 8)
    assert back.levels == 2
    assert back.block_bits == 4
    assert back.cross_permute
    assert [l.block_lengths for l in back.layouts] == [(3, 2), (2, 2)]
    for a, b in zip(back.indices, stream.indices):
        np.testing.assert_array_equal(a, b)


def test_payload_bits_accounting():
    stream = _dummy_stream()
    assert stream.total_blocks == 2 * 2 + 1 * 2
    assert stream.payload_bits == 6 * 4
    raw = stream.to_bytes()
    assert len(raw) == len(stream.header_bytes()) + (stream.payload_bits + 7) // 8


def test_parse_rejects_bad_magic():
    with pytest.raises(bs.CorruptStreamError):
        bs.parse(b"XXXX" + b"\0" * 50)


def test_parse_rejects_truncated_payload():
    raw = _dummy_stream().to_bytes()
    with pytest.raises(bs.CorruptStreamError):
        bs.parse(raw[:-2])


# --- patching ---

def test_patch_split_kodak_count():
    x = np.zeros((768, 512, 3))
    patches = patch_split(x, (64, 64))
    assert patches.shape == (96, 64 * 64, 3)


def test_patch_split_single_patch():
    x = np.arange(16.0).reshape(4, 4, 1)
    p = patch_split(x, (4, 4))
    assert p.shape == (1, 16, 1)
    np.testing.assert_array_equal(p[0, :, 0], np.arange(16.0))


def test_patch_merge_inverts_split():
    rng = np.random.default_rng(0)
    for shape, patch in [((8, 12), (4, 4)), ((6,), (2,)), ((4, 4, 6), (2, 2, 3))]:
        x = rng.normal(size=shape + (3,))
        np.testing.assert_array_equal(patch_merge(patch_split(x, patch), shape, patch), x)


def test_patch_split_rejects_nondivisible():
    with pytest.raises(ConfigError):
        patch_split(np.zeros((5, 5, 1)), (2, 2))


# --- psnr ---

def test_psnr_identical_capped():
    x = np.random.default_rng(1).uniform(size=(4, 4))
    assert psnr(x, x) == 100.0


def test_psnr_known_mse():
    ref = np.zeros(100)
    rec = np.full(100, 0.1)
    assert psnr(ref, rec) == pytest.approx(20.0)
    rng = np.random.default_rng(2)
    noise = rng.choice([-0.1, 0.1], size=100)
    assert psnr(ref, ref + noise) == pytest.approx(20.0)


def test_psnr_shape_mismatch():
    from birc.gradcore import ContractViolation
    with pytest.raises(ContractViolation):
        psnr(np.zeros(3), np.zeros(4))


# --- signal loading ---

def test_load_black_image(tmp_path):
    from birc import sigio
    sigio.write_pnm(tmp_path / "b.ppm", np.zeros((2, 2, 3), dtype=int))
    ds = load_signal(tmp_path / "b.ppm", "image")
    assert ds.values.shape == (2, 2, 3)
    assert np.all(ds.values == 0.0)
    assert ds.num_coords == 4


def test_load_max_pixel_normalizes_to_one(tmp_path):
    from birc import sigio
    sigio.write_pnm(tmp_path / "w.pgm", np.array([[255]]))
    ds = load_signal(tmp_path / "w.pgm", "image")
    assert ds.values[0, 0, 0] == 1.0


def test_signal_file_round_trip(tmp_path):
    from birc import sigio
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, size=(6, 4))
    sigio.write_pnm(tmp_path / "x.pgm", img)
    ds = load_signal(tmp_path / "x.pgm", "image")
    save_signal(ds, tmp_path / "y.pgm")
    assert (tmp_path / "x.pgm").read_bytes() == (tmp_path / "y.pgm").read_bytes()


# --- trained model store ---

def _tiny_trained_model(tmp_path=None, seed=0):
    model = make_model(signal=(8, 8), patch=(4, 4), levels=2, pe=4, latent_ch=2,
                       hidden=6, fourier=8, seed=seed)
    rng = np.random.default_rng(seed)
    targets = smooth_signals(4, (8, 8), rng)
    flat = np.stack([codec.patch_split(t, (4, 4)) for t in targets])
    cfg = TrainConfig(budget_bits=96.0, eps_bits=20.0, rounds=12, steps_per_round=25,
                      first_round_steps=40, lr=2e-3, seed=seed)
    train(flat, model, cfg)
    return model


def test_model_save_load_hash_stable(tmp_path):
    model = _tiny_trained_model()
    path = tmp_path / "model.npz"
    save_model(path, model)
    back = load_model(path)
    assert model_hash_u64(back) == model_hash_u64(model)
    assert back.arch == model.arch
    assert back.grid.levels == model.grid.levels
    for a, b in zip(back.prior_means, model.prior_means):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(back.transform.matrices, model.transform.matrices):
        np.testing.assert_array_equal(a, b)


# --- end-to-end ---

@pytest.fixture(scope="module")
def trained():
    model = _tiny_trained_model()
    rng = np.random.default_rng(77)
    test_signal = SignalDataset(smooth_signals(1, (8, 8), rng)[0], "image", 0.0, 255.0)
    return model, test_signal


def test_compress_decompress_round_trip(trained):
    model, ds = trained
    settings = CodeSettings(seed=5, infer_steps=60, samples=2, finetune_steps=3)
    blob, record = compress(ds, model, settings)
    out = decompress(blob, model)
    # encoder reports PSNR from its own decoded latents: must match the decoder exactly
    assert psnr(ds.values, out.values) == record.distortion_db
    assert out.values.shape == ds.values.shape
    assert record.rate_bits_payload == 16 * bs.parse(blob).total_blocks


def test_decompress_wrong_model_rejected(trained):
    model, ds = trained
    blob, _ = compress(ds, model, CodeSettings(seed=5, infer_steps=30, samples=1,
                                               finetune_steps=0))
    other = _tiny_trained_model(seed=9)
    with pytest.raises(bs.WrongModelError):
        decompress(blob, other)


def test_decompress_truncated_rejected(trained):
    model, ds = trained
    blob, _ = compress(ds, model, CodeSettings(seed=5, infer_steps=30, samples=1,
                                               finetune_steps=0))
    with pytest.raises(bs.CorruptStreamError):
        decompress(blob[:-1], model)


def test_compress_deterministic_across_runs_and_threads(trained):
    model, ds = trained
    kw = dict(seed=11, infer_steps=40, samples=2, finetune_steps=2)
    blob1, _ = compress(ds, model, CodeSettings(**kw, threads=1))
    blob2, _ = compress(ds, model, CodeSettings(**kw, threads=1))
    blob8, _ = compress(ds, model, CodeSettings(**kw, threads=8))
    assert blob1 == blob2 == blob8
    out1 = decompress(blob1, model, threads=1)
    out8 = decompress(blob1, model, threads=8)
    assert out1.values.tobytes() == out8.values.tobytes()


def test_prior_mean_baseline_and_rate_lift(trained):
    model, ds = trained
    blob, record = compress(ds, model, CodeSettings(seed=3, infer_steps=150, samples=2,
                                                    finetune_steps=3))
    base = prior_mean_reconstruction(model, ds)
    assert record.distortion_db > psnr(ds.values, base.values)


def test_all_zero_index_payload_is_prior_sample(trained):
    model, ds = trained
    blob, _ = compress(ds, model, CodeSettings(seed=7, infer_steps=20, samples=1,
                                               finetune_steps=0))
    stream = bs.parse(blob)
    for i, idx in enumerate(stream.indices):
        stream.indices[i] = np.zeros_like(idx)
    forced = decompress(stream.to_bytes(), model)
    # decoding all-zero indices equals evaluating the INR at the candidate-0
    # prior draws: check against a direct regeneration
    from birc.partition import BlockPartition, permute, unpermute
    from birc.rec import BlockCoder, block_seed, decode_block, plan_key
    from birc.trainer import patch_embedding, predict_values
    values = []
    plans = codec._make_plans(model, stream.global_seed, stream.cross_permute)
    for lvl, lay in enumerate(stream.layouts):
        part = BlockPartition(lay.block_lengths)
        pm = np.broadcast_to(model.prior_means[lvl], (lay.rows, lay.cols)).copy()
        pv = np.broadcast_to(model.prior_vars[lvl], (lay.rows, lay.cols)).copy()
        pm_p, pv_p = permute(pm, plans[lvl]), permute(pv, plans[lvl])
        out = np.zeros_like(pm_p)
        for i in range(lay.rows):
            for k, sl in enumerate(part.slices()):
                out[i, sl] = decode_block(0, pm_p[i, sl], pv_p[i, sl],
                                          BlockCoder(stream.block_bits,
                                                     block_seed(stream.global_seed, lvl, i, k)))
        values.append(unpermute(out, plans[lvl]))
    pred = predict_values([v[None] for v in values], model, patch_embedding(model))
    manual = codec.patch_merge(pred[0], model.grid.signal_shape, model.grid.patch_shape)
    np.testing.assert_array_equal(forced.values, manual)


def test_empty_latent_empty_payload():
    # zero blocks degenerate case: partition of an empty column set
    from birc.partition import BlockPartition
    part = BlockPartition(())
    assert part.block_count == 0
