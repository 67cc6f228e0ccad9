import numpy as np
import pytest

from fud import tensor as T
from fud.data import FormatError
from fud.models import (
    BuildError,
    ClassifierSpec,
    FilterPartition,
    Identifier,
    RemoverSpec,
    apply_remover,
    build,
    checkpoint_bytes,
    forward_hooked,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from fud.tensor import ContractError


def probe(n=4, shape=(1, 32, 32), seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n,) + shape)


def saturated_remover(value, shape=(1, 16, 16)):
    """Remover whose mask is (numerically) constant: zero weights, huge head bias."""
    E = build(RemoverSpec(input_shape=shape), seed=0)
    for p in E.parameters():
        p.data[...] = 0.0
    E.mask_head.bias.data[...] = value
    return E


# ---------------------------------------------------------------------------
# build


def test_default_classifier_logits_shape():
    M = build(ClassifierSpec(), seed=0)
    assert M(probe()).shape == (4, 2)


def test_remover_mask_shape_and_range():
    E = build(RemoverSpec(), seed=0)
    m = E.mask(probe()).data
    assert m.shape == (4, 1, 32, 32)
    assert np.all((m > 0) & (m < 1))


def test_same_seed_same_parameters():
    for spec in (ClassifierSpec(), RemoverSpec()):
        a, b = build(spec, 7), build(spec, 7)
        assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.parameters(), b.parameters()))
        c = build(spec, 8)
        assert any(x.data.tobytes() != y.data.tobytes() for x, y in zip(a.parameters(), c.parameters()))


def test_he_uniform_bounds():
    M = build(ClassifierSpec(), seed=0)
    k = M.convs[0].weight.data
    fan_in = k.shape[1] * k.shape[2] * k.shape[3]
    assert np.abs(k).max() <= np.sqrt(6 / fan_in)


def test_build_errors():
    with pytest.raises(BuildError):
        build(ClassifierSpec(conv=[(8, 3, 1)]))
    with pytest.raises(BuildError, match="layer 3"):
        build(ClassifierSpec(conv=[(4, 3, 1)] * 4, input_shape=(1, 8, 8)))
    with pytest.raises(BuildError):
        build(RemoverSpec(input_shape=(1, 6, 6)))
    with pytest.raises(BuildError):
        build(RemoverSpec(encoder=[8], decoder=[8, 8]))


# ---------------------------------------------------------------------------
# hooks


def test_hook_shape_on_last_conv():
    M = build(ClassifierSpec(), seed=0)
    out, act = forward_hooked(M, probe(), 1)
    assert act.shape == (4, 16, 8, 8)
    assert np.all(act.data >= 0)


def test_hooked_output_equals_plain_output():
    M = build(ClassifierSpec(), seed=0)
    x = probe()
    out, _ = forward_hooked(M, x, 0)
    assert out.data.tobytes() == M(x).data.tobytes()


def test_discarded_hook_leaves_gradients_unchanged():
    M = build(ClassifierSpec(input_shape=(1, 16, 16)), seed=0)
    x = probe(shape=(1, 16, 16))

    def grads(hook):
        M.zero_grad()
        with T.Tape() as tape:
            out = M.forward(x, hook=hook)
            out = out[0] if hook is not None else out
            loss = T.cross_entropy(out, [0, 1, 0, 1])
        T.backward(tape, loss)
        return [p.grad.copy() for p in M.parameters()]

    for a, b in zip(grads(None), grads(1)):
        assert a.tobytes() == b.tobytes()


def test_invalid_hook():
    with pytest.raises(ContractError):
        forward_hooked(build(ClassifierSpec(), 0), probe(), 5)


# ---------------------------------------------------------------------------
# remover


def test_mask_one_is_identity():
    E = saturated_remover(100.0)
    x = probe(shape=(1, 16, 16))
    x_hat = apply_remover(E, x)
    np.testing.assert_array_equal(x_hat.data, x)
    assert T.l1(x_hat, x).item() == 0.0


def test_mask_zero_blanks():
    E = saturated_remover(-800.0)
    np.testing.assert_array_equal(apply_remover(E, probe(shape=(1, 16, 16))).data, 0.0)


def test_masked_instance_in_unit_range():
    x_hat = apply_remover(build(RemoverSpec(), 3), probe()).data
    assert x_hat.min() >= 0 and x_hat.max() <= 1


def test_remover_gradient_flows_to_parameters():
    E = build(RemoverSpec(input_shape=(1, 8, 8)), seed=1)
    x = probe(2, (1, 8, 8))
    w = np.random.default_rng(0).normal(size=x.shape)
    E.zero_grad()
    with T.Tape() as tape:
        loss = T.tsum(apply_remover(E, x) * w)
    T.backward(tape, loss)
    assert all(np.abs(p.grad).sum() > 0 for p in E.parameters())


# ---------------------------------------------------------------------------
# partitions


def test_partition_validation():
    p = FilterPartition([1, 2, 1, 3])
    assert p.k == 3 and p.groups() == [[0, 2], [1], [3]]
    np.testing.assert_array_equal(p.indicator().sum(axis=0), [2, 1, 1])
    for bad in ([0, 1], [1, 3], []):
        with pytest.raises(ContractError):
            FilterPartition(bad)
    ident = Identifier(ClassifierSpec(), seed=0)
    with pytest.raises(ContractError):
        ident.partition = FilterPartition([1, 2])  # wrong width
    ident.partition = FilterPartition([1] * 8 + [2] * 8)
    assert ident.target_layer == 1


# ---------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("kind", ["classifier", "remover", "identifier"])
def test_checkpoint_round_trip(tmp_path, kind):
    if kind == "classifier":
        model = build(ClassifierSpec(input_shape=(1, 16, 16)), 4)
    elif kind == "remover":
        model = build(RemoverSpec(input_shape=(1, 16, 16)), 4)
    else:
        model = Identifier(ClassifierSpec(input_shape=(1, 16, 16)), seed=4)
        model.partition = FilterPartition([1, 2] * 8)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert checkpoint_bytes(back) == path.read_bytes()
    x = probe(3, (1, 16, 16))
    assert back(x).data.tobytes() == model(x).data.tobytes()
    if kind == "identifier":
        assert back.partition.assignment == model.partition.assignment


def test_checkpoint_extra_block(tmp_path):
    model = build(ClassifierSpec(input_shape=(1, 16, 16)), 0)
    _, extra = read_checkpoint(checkpoint_bytes(model, {"epoch": 3}))
    assert extra == {"epoch": 3}


def test_checkpoint_rejects_bad_files():
    raw = checkpoint_bytes(build(ClassifierSpec(input_shape=(1, 16, 16)), 0))
    with pytest.raises(FormatError):
        read_checkpoint(raw[:-1])
    with pytest.raises(FormatError):
        read_checkpoint(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        read_checkpoint(raw[:4] + (2).to_bytes(4, "little") + raw[8:])


def test_copy_is_independent():
    M = build(ClassifierSpec(input_shape=(1, 16, 16)), 0)
    N = M.copy()
    N.parameters()[0].data[...] = 0
    assert np.abs(M.parameters()[0].data).sum() > 0
