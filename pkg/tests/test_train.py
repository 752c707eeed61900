import json
import math

import numpy as np
import pytest

from cdtcn import data, model, train
from cdtcn import numerics as nx
from cdtcn.numerics import ContractError, Parameter


def reference_adam(grad, w0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out directly from the update equations."""
    w, m, v = w0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


@pytest.fixture(scope="module")
def toy_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy") / "corpus"
    return data.build_corpus(data.CorpusSpec(out_dir=str(out), n_train=6, n_valid=2, n_test=1, dur_s=0.25,
                                             noise_dur_s=0.5))


def small_system(seed=0, name="cd-tcn-bpf"):
    return model.EnhancementSystem(model.gradcheck_config(name, dtype="float32"), seed=seed)


# --- optimizer ----------------------------------------------------------------


def test_adam_quadratic():
    w = Parameter("w", np.array([0.0]), dtype=np.float64)
    state = train.OptimizerState(lr=0.1)
    for _ in range(500):
        w.grad = 2 * (w.data - 3.0)
        train.adam_step([w], state)
    assert abs(w.data[0] - 3.0) < 1e-3
    assert state.step == 500
    ref = reference_adam(lambda x: 2 * (x - 3.0), 0.0, 0.1, 500)
    assert abs(w.data[0] - ref) < 1e-12


def test_adam_zero_gradient_leaves_parameter():
    w = Parameter("w", np.array([1.5, -2.0]), dtype=np.float64)
    w.grad = np.zeros(2)
    train.adam_step([w], train.OptimizerState())
    assert w.data.tolist() == [1.5, -2.0]


def test_adam_missing_gradient_names_parameter():
    w = Parameter("encoder.U", np.zeros(3), dtype=np.float64)
    with pytest.raises(ContractError, match="encoder.U"):
        train.adam_step([w], train.OptimizerState())


def test_adam_rejects_nonpositive_lr():
    w = Parameter("w", np.zeros(1), dtype=np.float64)
    w.grad = np.ones(1)
    with pytest.raises(ContractError):
        train.adam_step([w], train.OptimizerState(lr=0.0))


def _grads(*values):
    ps = []
    for i, g in enumerate(values):
        p = Parameter(f"p{i}", np.zeros(len(g)), dtype=np.float64)
        p.grad = np.array(g, dtype=np.float64)
        ps.append(p)
    return ps


def test_clip_unchanged_below_limit():
    ps = _grads([3.0], [4.0])
    assert train.clip_grad_norm(ps, 10.0) == 5.0
    assert [p.grad[0] for p in ps] == [3.0, 4.0]


def test_clip_scales_to_limit():
    ps = _grads([3.0], [4.0])
    assert train.clip_grad_norm(ps, 1.0) == 5.0
    assert np.allclose([p.grad[0] for p in ps], [0.6, 0.8])


def test_clip_zero():
    ps = _grads([0.0, 0.0])
    assert train.clip_grad_norm(ps, 1.0) == 0.0
    assert not ps[0].grad.any()


# --- checkpoints ----------------------------------------------------------------


def _trained_checkpoint():
    system = small_system()
    state = train.OptimizerState()
    x = np.random.default_rng(0).normal(size=64)
    loss = nx.sum(nx.mul(system.forward(x), system.forward(x)))
    nx.backward(loss, system.parameters())
    train.adam_step(system.parameters(), state)
    return system, train.Checkpoint.from_system(system, state, epoch=3, seed=7, history=[(1, -1.0, 2.0)])


def test_checkpoint_save_load_save_identical(tmp_path):
    _, ckpt = _trained_checkpoint()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    train.save_checkpoint(a, ckpt)
    loaded = train.load_checkpoint(a)
    train.save_checkpoint(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    assert loaded.epoch == 3 and loaded.seed == 7 and loaded.history == [(1, -1.0, 2.0)]
    assert loaded.optimizer.step == 1
    for k, v in ckpt.params.items():
        assert np.array_equal(loaded.params[k], v) and loaded.params[k].dtype == v.dtype


def test_checkpoint_layout(tmp_path):
    _, ckpt = _trained_checkpoint()
    raw = train.encode_checkpoint(ckpt)
    assert raw[:4] == b"CDTN"
    assert int.from_bytes(raw[4:8], "little") == 1
    head_len = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + head_len])
    params = [t for t in header["tensors"] if t["name"].startswith("param/")]
    assert sum(math.prod(t["shape"]) for t in params) == model.param_count(ckpt.config)
    assert {t["dtype"] for t in params} == {"float32"}


def test_checkpoint_restore_preserves_forward(tmp_path):
    system, ckpt = _trained_checkpoint()
    train.save_checkpoint(tmp_path / "c.ckpt", ckpt)
    restored = train.load_checkpoint(tmp_path / "c.ckpt").restore()
    x = np.random.default_rng(1).normal(size=120)
    assert np.array_equal(system.enhance(x), restored.enhance(x))


def test_truncated_checkpoint(tmp_path):
    _, ckpt = _trained_checkpoint()
    raw = train.encode_checkpoint(ckpt)
    for cut in (3, 12, 40, len(raw) - 1):
        with pytest.raises(train.CheckpointError):
            train.decode_checkpoint(raw[:cut])


def test_unsupported_version():
    _, ckpt = _trained_checkpoint()
    raw = bytearray(train.encode_checkpoint(ckpt))
    raw[4:8] = (2).to_bytes(4, "little")
    with pytest.raises(train.CheckpointError, match="unsupported checkpoint version 2"):
        train.decode_checkpoint(bytes(raw))


def test_corrupt_tensor_table():
    _, ckpt = _trained_checkpoint()
    raw = train.encode_checkpoint(ckpt)
    bad = raw.replace(b'"nbytes":', b'"nbytez":', 1)
    with pytest.raises(train.CheckpointError):
        train.decode_checkpoint(bad)


def test_restore_rejects_mismatched_parameters():
    _, ckpt = _trained_checkpoint()
    ckpt.params.pop("encoder.U")
    with pytest.raises(train.CheckpointError, match="encoder.U"):
        ckpt.restore()


# --- loop ------------------------------------------------------------------------------


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_train_is_deterministic(toy_manifest, tmp_path):
    h1 = train.train(small_system(), toy_manifest, 2, seed=3, checkpoint_dir=tmp_path / "a")
    h2 = train.train(small_system(), toy_manifest, 2, seed=3, checkpoint_dir=tmp_path / "b")
    assert h1 == h2
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert sorted(_files(tmp_path / "a")) == ["epoch_001.ckpt", "epoch_002.ckpt", "history.csv"]
    assert [e for e, _, _ in h1] == [1, 2]


def test_train_seed_changes_order(toy_manifest):
    h1 = train.train(small_system(), toy_manifest, 1, seed=1)
    h2 = train.train(small_system(), toy_manifest, 1, seed=2)
    assert h1[0][1] != h2[0][1]


def test_zero_epochs_writes_initial_checkpoint_only(toy_manifest, tmp_path):
    assert train.train(small_system(), toy_manifest, 0, checkpoint_dir=tmp_path) == []
    assert sorted(_files(tmp_path)) == ["epoch_000.ckpt", "history.csv"]


def test_history_csv_format():
    text = train.history_csv([(1, -2.5, 3.25)])
    assert text == "epoch,train_loss,valid_si_snr\n1,-2.5,3.25\n"


def test_nan_loss_aborts_and_keeps_earlier_checkpoints(toy_manifest, tmp_path, monkeypatch):
    system = small_system()
    real_forward = system.forward
    calls = {"n": 0}

    def poisoned(x):
        calls["n"] += 1
        out = real_forward(x)
        if calls["n"] > 6 + 2:  # epoch 1 is 6 training and 2 validation passes
            return nx.mul(out, nx.Tensor(np.array(np.nan, dtype=out.dtype)))
        return out

    monkeypatch.setattr(system, "forward", poisoned)
    with pytest.raises(train.NumericalError, match="epoch 2"):
        train.train(system, toy_manifest, 3, checkpoint_dir=tmp_path)
    assert sorted(_files(tmp_path)) == ["epoch_001.ckpt", "history.csv"]


def test_unreadable_audio_fails_with_path(toy_manifest, tmp_path):
    rec = toy_manifest.split("train")[0]
    broken = data.MixtureManifest([data.MixtureRecord(rec.clean_path, rec.noise_path, "missing.wav", 5.0, "train")]
                                  + toy_manifest.split("valid"), toy_manifest.root, 8000)
    with pytest.raises(OSError, match="missing.wav"):
        train.train(small_system(), broken, 1)


def test_train_requires_train_and_valid(toy_manifest):
    only_train = data.MixtureManifest(toy_manifest.split("train"), toy_manifest.root, 8000)
    with pytest.raises(ContractError):
        train.train(small_system(), only_train, 1)
