from __future__ import annotations

import numpy as np
import pytest
import torch

from qlossbench.errors import BadMagicError, FormatError, NumericalAbort, TruncatedStreamError, VersionMismatchError
from qlossbench.experiment import NoiseParams, sample_dataset
from qlossbench.stgnn import checkpoint
from qlossbench.stgnn.model import STGNN, ModelConfig, encode, encode_dataset
from qlossbench.stgnn.train import (
    OptimizerConfig, Targets, backward, multi_task_loss, positive_weight, predict,
    predict_loss_mask, targets_of, train,
)

SMALL = ModelConfig(D=8, n_heads=2, N_l=1, seed=3)


@pytest.fixture(scope="module")
def tiny(layout3):
    return sample_dataset(layout3, NoiseParams.uniform(0.03), 3, "Z", 48, seed=2)


def test_output_shapes(layout3, tiny):
    m = STGNN(layout3, SMALL)
    logical, loss = m(encode_dataset(tiny, slice(0, 5)))
    assert logical.shape == (5, 3)
    assert loss.shape == (5, 9, 3)
    assert logical.dtype == torch.float64
    assert m.forward_calls == 1


def test_default_parameter_count(layout3):
    assert STGNN(layout3).n_parameters() == 40300


def test_seeded_init_is_reproducible(layout3):
    a = STGNN(layout3, SMALL).state_dict()
    b = STGNN(layout3, SMALL).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = STGNN(layout3, ModelConfig(D=8, n_heads=2, N_l=1, seed=4)).state_dict()
    assert not torch.equal(a["embed.proj.weight"], c["embed.proj.weight"])


@pytest.mark.parametrize(
    "kwargs", [{"D": 10, "n_heads": 4}, {"kernel": 2}, {"N_l": 0}, {"distance_cap": 0},
               {"lambda_logic": 0, "lambda_loss": 0}, {"dropout": 1.0}],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_encode_checks_shapes(layout3):
    with pytest.raises(ValueError):
        encode(layout3, np.zeros((2, 3, 8)), np.zeros((2, 3, 8)), 0)
    x = encode(layout3, np.ones((3, 8)), np.ones((4, 8)), 1)
    assert x.batch == 1 and x.T == 3
    assert int(x.anc_bit[0, :, :9].sum()) == 0
    assert int(x.anc_bit[0, 3].sum()) == 0


def test_kernel_longer_than_window(layout3):
    m = STGNN(layout3, ModelConfig(D=8, n_heads=2, N_l=1, kernel=5))
    with pytest.raises(ValueError):
        m(encode(layout3, np.zeros((1, 2, 8)), np.zeros((1, 3, 8)), 0))


def test_logical_term_skipped_when_everything_excluded():
    logical = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
    loss = torch.zeros(2, 9, 3, dtype=torch.float64)
    t = Targets(torch.zeros(2, 3, dtype=torch.float64), torch.ones(2, 3, dtype=torch.bool),
                torch.zeros(2, 9, 3, dtype=torch.float64))
    total, parts = multi_task_loss(logical, loss, t, 1.0, 1.0)
    assert parts["logical_skipped"] and parts["logical"] == 0.0
    assert total.item() == pytest.approx(np.log(2))


def test_positive_weight():
    assert positive_weight(np.zeros(10)) == 1.0
    assert positive_weight(np.array([1, 0, 0, 0])) == 3.0


def test_gradients_match_finite_differences_on_a_few_entries(layout3, tiny):
    m = STGNN(layout3, SMALL)
    x = encode_dataset(tiny, slice(0, 4))
    tg = targets_of(tiny, slice(0, 4))
    grads, _ = backward(m, x, tg, 2.0)
    rng = np.random.default_rng(0)
    h = 1e-5
    for name, p in list(m.named_parameters())[::5]:
        flat = p.data.view(-1)
        i = int(rng.integers(flat.numel()))
        vals = []
        for sgn in (1, -1):
            flat[i] += sgn * h
            with torch.no_grad():
                a, b = m(x)
                vals.append(multi_task_loss(a, b, tg, 1.0, 1.0, 2.0)[0].item())
            flat[i] -= sgn * h
        fd = (vals[0] - vals[1]) / (2 * h)
        assert grads[name].view(-1)[i].item() == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_backward_aborts_on_nan(layout3, tiny):
    m = STGNN(layout3, SMALL)
    with torch.no_grad():
        m.embed.proj.bias.fill_(float("nan"))
    with pytest.raises(NumericalAbort):
        backward(m, encode_dataset(tiny, slice(0, 2)), targets_of(tiny, slice(0, 2)))


def test_training_reduces_objective_and_is_deterministic(layout3, tiny):
    runs = []
    for _ in range(2):
        m = STGNN(layout3, SMALL)
        res = train(m, tiny, OptimizerConfig(lr=1e-2, epochs=6, batch_size=16))
        runs.append(res)
    assert runs[0].history[-1].total < runs[0].history[0].total
    assert [s.total for s in runs[0].history] == [s.total for s in runs[1].history]
    assert runs[0].epochs_done == 6


def test_cosine_schedule_runs_and_is_validated(layout3, tiny):
    m = STGNN(layout3, SMALL)
    res = train(m, tiny, OptimizerConfig(lr=1e-2, epochs=3, batch_size=16, schedule="cosine"))
    assert res.epochs_done == 3
    with pytest.raises(ValueError):
        OptimizerConfig(schedule="step")


def test_training_stop_and_resume_counter(layout3, tiny):
    m = STGNN(layout3, SMALL)
    res = train(m, tiny, OptimizerConfig(epochs=10, batch_size=16), start_epoch=4, stop=lambda s: True)
    assert res.epochs_done == 5 and len(res.history) == 1


def test_train_rejects_mismatch(layout3, layout5, tiny):
    with pytest.raises(ValueError):
        train(STGNN(layout5, SMALL), tiny, OptimizerConfig(epochs=1))


def test_predict(layout3, tiny):
    m = STGNN(layout3, SMALL)
    flips, probs = predict(m, encode_dataset(tiny))
    assert flips.shape == (len(tiny), 3) and set(np.unique(flips)) <= {0, 1}
    assert probs.shape == (len(tiny), 9, 3)
    mask, p = predict_loss_mask(m, tiny[0], 0.5)
    assert np.allclose(p, probs[0])
    assert np.array_equal(mask, (p >= 0.5).astype(np.uint8))
    with pytest.raises(ValueError):
        predict_loss_mask(m, tiny[0], 1.5)


def test_checkpoint_round_trip(layout3, tiny, tmp_path):
    m = STGNN(layout3, SMALL)
    train(m, tiny, OptimizerConfig(epochs=1, batch_size=16))
    path = tmp_path / "m.qlwm"
    checkpoint.save_model(path, m, epoch=7, extra={"note": "x"})
    back, header = checkpoint.load_model(path)
    assert header["epoch"] == 7 and header["extra"] == {"note": "x"}
    assert checkpoint.serialize_model(back, 7, {"note": "x"}) == path.read_bytes()
    x = encode_dataset(tiny, slice(0, 3))
    with torch.no_grad():
        assert torch.equal(m.eval()(x)[0], back(x)[0])


def test_checkpoint_errors(layout3):
    blob = checkpoint.serialize_model(STGNN(layout3, SMALL))
    with pytest.raises(BadMagicError):
        checkpoint.deserialize_model(b"NOPE" + blob[4:])
    with pytest.raises(TruncatedStreamError):
        checkpoint.deserialize_model(blob[:-8])
    with pytest.raises(TruncatedStreamError):
        checkpoint.deserialize_model(blob[:2])
    with pytest.raises(VersionMismatchError):
        checkpoint.deserialize_model(blob[:4] + (2).to_bytes(2, "little") + blob[6:])
    with pytest.raises(FormatError):
        checkpoint.deserialize_model(blob + b"\0" * 8)


# --------------------------------------------------------------------------
# block-level invariants


def _volume(seed=0, B=3, T1=4, N=17, D=8):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(B, T1, N, D, generator=g, dtype=torch.float64)


def test_blocks_preserve_shape(layout3):
    m = STGNN(layout3, SMALL)
    h = _volume()
    blk = m.blocks[0]
    for sub in (blk.gnn, blk.temporal, blk.spatial, blk):
        assert sub(h).shape == h.shape


def test_zero_gnn_weights_give_normalized_input(layout3):
    m = STGNN(layout3, SMALL)
    gnn = m.blocks[0].gnn
    with torch.no_grad():
        for p in gnn.update.parameters():
            p.zero_()
    h = _volume()
    assert torch.allclose(gnn(h), gnn.norm(h), atol=1e-12)


@pytest.mark.parametrize("bias,branch", [(1e4, 0), (-1e4, 1)])
def test_saturated_gate_selects_one_branch(layout3, bias, branch):
    tm = STGNN(layout3, SMALL).blocks[0].temporal
    with torch.no_grad():
        tm.gate.weight.zero_()
        tm.gate.bias.fill_(bias)
    h = _volume()
    want = tm.norm(h + tm.branches(h)[branch])
    assert torch.allclose(tm(h), want, atol=1e-10)


def test_attention_rows_sum_to_one(layout3):
    sp = STGNN(layout3, SMALL).blocks[0].spatial
    with torch.no_grad():
        sp.bias_table.normal_()
    _, w = sp.attn(_volume(), sp.bias(), return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_distance_bias_can_force_self_attention(layout3):
    sp = STGNN(layout3, SMALL).blocks[0].spatial
    with torch.no_grad():
        sp.bias_table.fill_(-1e9)
        sp.bias_table[:, 0] = 0.0
    _, w = sp.attn(_volume(), sp.bias(), return_weights=True)
    eye = torch.eye(w.shape[-1], dtype=w.dtype)
    assert torch.allclose(w, eye.expand_as(w), atol=1e-9)


def test_inference_is_deterministic_and_batch_independent(layout3, tiny):
    m = STGNN(layout3, SMALL).eval()
    x = encode_dataset(tiny, slice(0, 8))
    with torch.no_grad():
        a1, b1 = m(x)
        a2, b2 = m(x)
        a3, b3 = m(x.select(slice(2, 5)))
    assert torch.equal(a1, a2) and torch.equal(b1, b2)
    assert torch.allclose(a1[2:5], a3, atol=1e-6) and torch.allclose(b1[2:5], b3, atol=1e-6)


def test_round_order_matters(layout3):
    m = STGNN(layout3, SMALL).eval()
    rng = np.random.default_rng(0)
    anc = rng.integers(0, 2, (2, 4, 8))
    det = rng.integers(0, 2, (2, 5, 8))
    perm = [3, 1, 4, 0, 2]
    with torch.no_grad():
        _, a = m(encode(layout3, anc, det, 0))
        _, b = m(encode(layout3, anc[:, [2, 0, 3, 1]], det[:, perm], 0))
    assert not torch.allclose(a, b)
