import numpy as np
import pytest

from conftest import tiny_block, tiny_config
from mmlego import tensor as T
from mmlego.encoders import collate_bags
from mmlego.errors import ConfigError, DepthZero, ShapeMismatch
from mmlego.fft import naive_dft
from mmlego.legoblock import BlockConfig, frequency_update
from mmlego.training import Labels, TaskSpec, task_loss


def naive_dft2(x):
    c, d = x.shape
    return naive_dft(naive_dft(x.astype(complex)).T).T / np.sqrt(c * d)


def naive_idft2(z):
    c, d = z.shape
    return naive_dft(naive_dft(z, inverse=True).T, inverse=True).T / np.sqrt(c * d)


def oracle_pass(latent, tokens, wq, wk, wv):
    """One update pass written with loops and the O(n^2) DFT."""
    z = naive_dft2(latent)
    re, im = z.real, z.imag
    kv = naive_dft2(tokens).real
    keys, vals = kv @ wk, kv @ wv
    out = np.zeros_like(re)
    for i in range(re.shape[0]):
        q = re[i] @ wq
        s = np.array([q @ keys[j] for j in range(len(keys))]) / np.sqrt(wq.shape[1])
        a = np.exp(s - s.max())
        a /= a.sum()
        out[i] = sum(a[j] * vals[j] for j in range(len(vals)))
    return re + out, im


def test_single_pass_matches_scalar_oracle(rng):
    block = tiny_block("bag", "identity", input_dim=6)
    latent = rng.normal(size=(4, 6))
    tokens = rng.normal(size=(3, 6))
    a = {k: v.data for k, v in block.attn[0].items()}
    want_re, want_im = oracle_pass(latent, tokens, a["wq"], a["wk"], a["wv"])
    kv, bias = block.encode((tokens[None], np.ones((1, 3), bool)))
    re, im, _ = frequency_update(T.Tensor(latent[None]), kv, bias, block.attn[0], block.config)
    np.testing.assert_allclose(re.data[0], want_re, atol=1e-10)
    np.testing.assert_allclose(im.data[0], want_im, atol=1e-10)
    nxt = block.block_update(T.Tensor(latent[None]), kv, bias).data[0]
    np.testing.assert_allclose(nxt, naive_idft2(want_re + 1j * want_im).real, atol=1e-10)


def test_forward_shapes_and_trace(rng):
    block = tiny_block()
    trace = []
    logits = block.forward(rng.normal(size=(5, 3)), trace=trace)
    assert logits.shape == (5, 2)
    assert len(trace) == block.config.depth
    assert trace[-1]["spatial"] is None and trace[0]["spatial"].shape == (5, 4, 6)


def test_imaginary_part_is_carried_unchanged(rng):
    block = tiny_block()
    latent = T.Tensor(rng.normal(size=(2, 4, 6)))
    kv, _ = block.encode(rng.normal(size=(2, 3)))
    _, im_in = T.dft2(latent)
    _, im_out, _ = frequency_update(latent, kv, None, block.attn[0], block.config)
    assert np.array_equal(im_in.data, im_out.data)
    off = tiny_block(config=tiny_config(track_imaginary=False))
    _, im_off, _ = frequency_update(latent, kv, None, off.attn[0], off.config)
    assert not im_off.data.any()


def test_depth_zero_rejected():
    with pytest.raises(DepthZero):
        BlockConfig(depth=0)


def test_padded_tokens_need_row_transform(rng):
    block = tiny_block("bag", "abmil", input_dim=2, include_instances=True)
    padded, mask = collate_bags([rng.normal(size=(1, 2)), rng.normal(size=(3, 2))], 2)
    with pytest.raises(ConfigError):
        block.forward((padded, mask))
    rows = tiny_block("bag", "abmil", input_dim=2, include_instances=True,
                      config=tiny_config(kv_transform="rows"))
    both = rows((padded, mask))
    alone = rows((padded[:1, :1], mask[:1, :1]))
    np.testing.assert_allclose(both[0], alone[0], atol=1e-10)


def test_shared_init_seed_aligns_mergeable_parameters():
    a = tiny_block("tab", "snn", input_dim=3, seed=1, init_seed=9)
    b = tiny_block("bag", "abmil", input_dim=2, seed=2, init_seed=9)
    assert np.array_equal(a.latent_init.data, b.latent_init.data)
    assert np.array_equal(a.head["w"].data, b.head["w"].data)
    assert not np.array_equal(a.encoder.params["fc0.w"].data[:2], b.encoder.params["fc0.w"].data)


def test_multihead_and_unshared_passes(rng):
    cfg = tiny_config(attn_dim=6, head_dim=3, share_passes=False, head_imag=True)
    block = tiny_block(config=cfg)
    assert cfg.n_heads == 2 and len(block.attn) == cfg.depth and "wo" in block.attn[0]
    assert block.forward(rng.normal(size=(2, 3))).shape == (2, 2)
    assert block.head["w"].shape[0] == 2 * 4 * 6


def test_latent_shape_mismatch(rng):
    block = tiny_block()
    kv, _ = block.encode(rng.normal(size=(1, 3)))
    with pytest.raises(ShapeMismatch):
        frequency_update(T.Tensor(np.zeros((1, 3, 6))), kv, None, block.attn[0], block.config)


def test_normaliser_standardises_inputs(rng):
    block = tiny_block()
    x = rng.normal(5.0, 3.0, size=(50, 3))
    block.fit_normaliser(x)
    z = block.prepare(x)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)


@pytest.mark.parametrize("kind", ["binary", "survival"])
def test_full_block_gradients(kind, rng):
    task = TaskSpec(kind, n_bins=3)
    block = tiny_block("bag", "abmil", input_dim=2, task=task, include_instances=True,
                       config=tiny_config(kv_transform="rows"))
    padded, mask = collate_bags([rng.normal(size=(n, 2)) for n in (1, 3, 2)], 2)
    if kind == "binary":
        labels = Labels("binary", np.array([0, 1, 1]))
    else:
        labels = Labels("survival", np.array([0, 2, 1]), np.array([1.0, 3.0, 2.0]),
                        np.array([0, 1, 0]))
    params = list(block.parameters().values())
    rep = T.gradcheck(lambda: task_loss(block.forward((padded, mask)), labels, task), params)
    assert max(rep.values()) < 1e-4, rep
