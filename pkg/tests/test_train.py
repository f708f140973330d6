import numpy as np
import pytest

from refquery import nn
from refquery.data import generate_synthetic
from refquery.losses import LossConfig
from refquery.train import (AdamW, CheckpointError, TrainingError, load_model, read_checkpoint,
                            read_loss_csv, save_model, train, write_checkpoint, write_loss_csv)

from conftest import small_model_config, small_spec


def dataset(n=2, t=3):
    return [generate_synthetic(small_spec(seed=s, T=t)) for s in range(n)]


def fast_cfg(**kw):
    base = dict(lr=1e-3, iterations=3, T=2, batch_size=1)
    base.update(kw)
    return LossConfig(**base)


def state_bytes(model):
    return b"".join(v.tobytes() for _, v in sorted(model.state_dict().items()))


# -------------------------------------------------------------------- AdamW

def test_adamw_matches_hand_computation():
    p = nn.param(np.array([1.0, -2.0]))
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.05)
    m = v = np.zeros(2)
    x = np.array([1.0, -2.0])
    for step, g in enumerate([np.array([0.5, -1.0]), np.array([0.2, 0.3])], start=1):
        p.grad = g.astype(np.float32)
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh, vh = m / (1 - 0.9 ** step), v / (1 - 0.999 ** step)
        x = x * (1 - 0.1 * 0.05) - 0.1 * mh / (np.sqrt(vh) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-6)


def test_zero_learning_rate_leaves_parameters_bit_identical():
    clips = dataset()
    before = state_bytes(train(clips, small_model_config(), fast_cfg(iterations=0)).model)
    after = state_bytes(train(clips, small_model_config(), fast_cfg(lr=0.0)).model)
    assert before == after


# ------------------------------------------------------------- determinism

def test_same_seed_same_curve_and_weights():
    clips = dataset()
    a = train(clips, small_model_config(), fast_cfg(), seed=3)
    b = train(clips, small_model_config(), fast_cfg(), seed=3)
    assert [r.as_row() for r in a.history] == [r.as_row() for r in b.history]
    assert state_bytes(a.model) == state_bytes(b.model)
    c = train(clips, small_model_config(), fast_cfg(), seed=4)
    assert state_bytes(c.model) != state_bytes(a.model)


def test_resume_matches_uninterrupted_run(tmp_path):
    clips = dataset(3)
    cfg = fast_cfg(iterations=4, batch_size=2)
    full = train(clips, small_model_config(), cfg, seed=1)
    half = train(clips, small_model_config(), cfg, seed=1, iterations=2)
    save_model(tmp_path / "c.rqck", half.model, half.optimizer, {"iteration": 2, "seed": 1})
    rest = train(clips, small_model_config(), cfg, seed=1, resume=tmp_path / "c.rqck")
    assert rest.start_iteration == 2
    assert [r.as_row() for r in half.history + rest.history] == [r.as_row() for r in full.history]
    assert state_bytes(rest.model) == state_bytes(full.model)


def test_resume_with_other_seed_is_refused(tmp_path):
    clips = dataset(1)
    r = train(clips, small_model_config(), fast_cfg(iterations=1), seed=1)
    save_model(tmp_path / "c.rqck", r.model, r.optimizer, {"iteration": 1, "seed": 1})
    with pytest.raises(CheckpointError, match="seed"):
        train(clips, small_model_config(), fast_cfg(), seed=2, resume=tmp_path / "c.rqck")


def test_loss_identity_every_iteration():
    hist = train(dataset(), small_model_config(), fast_cfg(iterations=4, batch_size=2)).history
    for rec in hist:
        assert abs(rec.L_train - (rec.L_v + rec.L_f + 0.5 * rec.L_sim)) <= 1e-6


def test_empty_dataset_is_an_error():
    with pytest.raises(TrainingError):
        train([], small_model_config(), fast_cfg())


def test_short_overfit_lowers_loss():
    clips = dataset(1, t=2)
    hist = train(clips, small_model_config(), fast_cfg(iterations=25, lr=3e-3)).history
    assert hist[-1].L_train < hist[0].L_train


# -------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_exact(tmp_path):
    model = train(dataset(1), small_model_config(), fast_cfg(iterations=1)).model
    save_model(tmp_path / "m.rqck", model)
    back, _, header = load_model(tmp_path / "m.rqck")
    assert state_bytes(back) == state_bytes(model)
    assert header["model_config"] == small_model_config().to_dict()


def test_checkpoint_bytes_are_reproducible(tmp_path):
    for name in ("a", "b"):
        model = train(dataset(1), small_model_config(), fast_cfg(iterations=2), seed=5).model
        save_model(tmp_path / name, model)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_shape_mismatch_names_the_tensor(tmp_path):
    model = train(dataset(1), small_model_config(), fast_cfg(iterations=0)).model
    save_model(tmp_path / "m.rqck", model)
    with pytest.raises(CheckpointError, match=r"tensor model\.\S+: checkpoint"):
        load_model(tmp_path / "m.rqck", expect=small_model_config(C=16))


def test_config_difference_without_shape_change(tmp_path):
    model = train(dataset(1), small_model_config(), fast_cfg(iterations=0)).model
    save_model(tmp_path / "m.rqck", model)
    with pytest.raises(CheckpointError, match="chain_matching"):
        load_model(tmp_path / "m.rqck", expect=small_model_config(chain_matching=False))


def test_corrupt_and_truncated_checkpoints(tmp_path):
    write_checkpoint(tmp_path / "c", {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"a": 1})
    tensors, header = read_checkpoint(tmp_path / "c")
    assert header == {"a": 1} and tensors["x"].tolist() == [[0, 1, 2], [3, 4, 5]]
    raw = (tmp_path / "c").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "t")
    (tmp_path / "m").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        read_checkpoint(tmp_path / "m")
    with pytest.raises(CheckpointError, match="model_config"):
        load_model(tmp_path / "c")


# ---------------------------------------------------------------------- CSV

def test_loss_csv_round_trip_and_append(tmp_path):
    hist = train(dataset(1), small_model_config(), fast_cfg(iterations=3)).history
    write_loss_csv(tmp_path / "l.csv", hist[:2])
    write_loss_csv(tmp_path / "l.csv", hist[2:], start=2, append=True)
    rows = read_loss_csv(tmp_path / "l.csv")
    assert [i for i, _ in rows] == [1, 2, 3]
    assert [r.as_row() for _, r in rows] == [r.as_row() for r in hist]
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "iteration,L_v,L_f,L_sim,L_train"
