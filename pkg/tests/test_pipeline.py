import csv

import numpy as np
import pytest
import torch

from diffreg.config import TrainConfig
from diffreg.data import PHANTOM_CLASSES, PhantomSpec, generate_phantom_pair
from diffreg.errors import ConfigError, DomainError
from diffreg.pipeline import (
    TRAIN_LOG_FIELDS,
    Trainer,
    build_model,
    build_optimizer,
    evaluate,
    load_checkpoint,
    register,
    save_checkpoint,
    schedule_from_config,
    train_step,
)


def make_pairs(n=2, extent=(16, 16), start=0):
    out = []
    for s in range(start, start + n):
        p = generate_phantom_pair(s, PhantomSpec(extent=extent, amplitude=1.5))
        out.append({"id": f"p{s}", "fixed": p.fixed.batched(), "moving": p.moving.batched(),
                    "fixed_labels": p.fixed_labels.batched(), "moving_labels": p.moving_labels.batched()})
    return out


@pytest.fixture
def cfg():
    return TrainConfig(epochs=100, learning_rate=1e-3)


def params_of(module):
    return [p.detach().clone() for p in module.parameters()]


class TestTrainStep:
    def _step(self, cfg, t=5, seed=0):
        model = build_model(cfg)
        opt = build_optimizer(model, cfg)
        pair = make_pairs(1)[0]
        eps = torch.randn(pair["fixed"].shape, generator=torch.Generator().manual_seed(seed))
        return model, opt, pair, eps

    def test_zero_weights_decouple_registration(self, cfg):
        cfg = cfg.replace(**{"loss.lambda": 0.0, "loss.lambda_phi": 0.0})
        model, opt, pair, eps = self._step(cfg)
        reg_before = params_of(model.registration_decoder) + params_of(model.field_heads)
        enc_before = params_of(model.encoder)
        res = train_step(model, opt, pair["fixed"], pair["moving"], 5, eps, cfg, schedule_from_config(cfg))
        assert res.loss_total == pytest.approx(res.l_diffusion, rel=1e-6)
        reg_after = params_of(model.registration_decoder) + params_of(model.field_heads)
        assert all(torch.equal(a, b) for a, b in zip(reg_before, reg_after))
        assert not all(torch.equal(a, b) for a, b in zip(enc_before, params_of(model.encoder)))

    def test_reports_components(self, cfg):
        model, opt, pair, eps = self._step(cfg)
        res = train_step(model, opt, pair["fixed"], pair["moving"], 5, eps, cfg, schedule_from_config(cfg))
        expected = res.l_diffusion + 20 * res.l_score_ncc + 20 * res.smooth
        assert res.loss_total == pytest.approx(expected, rel=1e-5)
        assert res.l_score_ncc <= 0

    def test_inputs_untouched(self, cfg):
        model, opt, pair, eps = self._step(cfg)
        copies = {k: v.clone() for k, v in pair.items() if k != "id"}
        eps_copy = eps.clone()
        train_step(model, opt, pair["fixed"], pair["moving"], 5, eps, cfg, schedule_from_config(cfg))
        assert all(torch.equal(pair[k], v) for k, v in copies.items())
        assert torch.equal(eps, eps_copy)

    def test_non_finite_aborts_without_update(self, cfg):
        model, opt, pair, eps = self._step(cfg)
        before = params_of(model)
        bad = pair["fixed"].clone()
        bad[0, 0, 3, 3] = float("nan")
        with pytest.raises(DomainError):
            train_step(model, opt, bad, pair["moving"], 5, eps, cfg, schedule_from_config(cfg))
        assert all(torch.equal(a, b) for a, b in zip(before, params_of(model)))

    def test_time_step_domain(self, cfg):
        model, opt, pair, eps = self._step(cfg)
        with pytest.raises(DomainError):
            train_step(model, opt, pair["fixed"], pair["moving"], 0, eps, cfg, schedule_from_config(cfg))


class TestRegister:
    def test_untrained_is_identity(self, cfg):
        model = build_model(cfg)
        pair = make_pairs(1)[0]
        phi, warped = register(model, pair["fixed"], pair["moving"])
        assert torch.equal(phi, torch.zeros_like(phi))
        assert torch.equal(warped, pair["moving"])

    def test_deterministic_and_draws_no_randomness(self, cfg):
        trainer = Trainer(cfg.replace(max_steps=3), make_pairs(2))
        trainer.fit()
        pair = make_pairs(1, start=50)[0]
        torch_state = torch.get_rng_state()
        np_state = np.random.get_state()[1].copy()
        a = register(trainer.model, pair["fixed"], pair["moving"])
        b = register(trainer.model, pair["fixed"], pair["moving"])
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        assert torch.equal(torch.get_rng_state(), torch_state)
        assert np.array_equal(np.random.get_state()[1], np_state)

    def test_indivisible_extent(self, cfg):
        model = build_model(cfg)
        x = torch.zeros(1, 1, 18, 16)
        with pytest.raises(ConfigError):
            register(model, x, x)


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, cfg, tmp_path):
        trainer = Trainer(cfg.replace(max_steps=4), make_pairs(2))
        trainer.fit()
        path = tmp_path / "ck.pt"
        save_checkpoint(path, trainer.model, trainer.optimizer, trainer.cfg, 1, 4, trainer.generator.get_state())
        model, opt, payload = load_checkpoint(path)
        assert payload["config"] == trainer.cfg
        assert payload["step"] == 4
        pair = make_pairs(1, start=9)[0]
        a = register(trainer.model, pair["fixed"], pair["moving"])
        b = register(model, pair["fixed"], pair["moving"])
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        assert float(opt.state_dict()["state"][0]["step"]) == float(trainer.optimizer.state_dict()["state"][0]["step"])

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.pt"
        torch.save({"weights": 1}, path)
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.pt")


class TestTrainer:
    def test_same_seed_same_history(self, cfg):
        a = Trainer(cfg.replace(max_steps=5), make_pairs(3)).fit()
        b = Trainer(cfg.replace(max_steps=5), make_pairs(3)).fit()
        assert a == b

    def test_seed_changes_run(self, cfg):
        a = Trainer(cfg.replace(max_steps=3), make_pairs(3)).fit()
        b = Trainer(cfg.replace(max_steps=3, seed=1), make_pairs(3)).fit()
        assert a != b

    def test_log_file(self, cfg, tmp_path):
        Trainer(cfg.replace(max_steps=5), make_pairs(2), out_dir=tmp_path).fit()
        rows = list(csv.DictReader((tmp_path / "train_log.csv").open()))
        assert tuple(rows[0]) == TRAIN_LOG_FIELDS
        assert [int(r["step"]) for r in rows] == [1, 2, 3, 4, 5]
        assert all(1 <= int(r["t"]) <= 2000 for r in rows)

    @pytest.mark.parametrize("stop_at", [2, 3])
    def test_interrupted_run_resumes_exactly(self, cfg, tmp_path, stop_at):
        pairs = make_pairs(2)
        full_cfg = cfg.replace(max_steps=6)
        reference = Trainer(full_cfg, pairs)
        ref_history = reference.fit()

        # stop mid-epoch (3) or on an epoch boundary (2), as a kill after the last checkpoint would
        Trainer(full_cfg, pairs, out_dir=tmp_path).fit(callback=lambda tr, row: row["step"] < stop_at)
        resumed = Trainer(full_cfg, pairs, out_dir=tmp_path)
        assert resumed.step == stop_at
        history = resumed.fit()
        assert history == ref_history
        for a, b in zip(reference.model.parameters(), resumed.model.parameters()):
            assert torch.equal(a, b)
        rows = list(csv.DictReader((tmp_path / "train_log.csv").open()))
        assert [int(r["step"]) for r in rows] == list(range(1, 7))

    def test_resume_refuses_other_config(self, cfg, tmp_path):
        Trainer(cfg.replace(max_steps=2), make_pairs(2), out_dir=tmp_path).fit()
        with pytest.raises(ConfigError):
            Trainer(cfg.replace(max_steps=4, **{"loss.gamma": 0.0}), make_pairs(2), out_dir=tmp_path)

    def test_no_pairs(self, cfg):
        with pytest.raises(DomainError):
            Trainer(cfg, [])

    def test_aborted_steps_are_counted(self, cfg):
        pairs = make_pairs(2)
        pairs[0]["fixed"] = pairs[0]["fixed"].clone()
        pairs[0]["fixed"][0, 0, 0, 0] = float("inf")
        trainer = Trainer(cfg.replace(max_steps=4), pairs)
        history = trainer.fit()
        assert trainer.aborted_steps == 2
        assert len(history) == 2


class TestOverfit:
    def test_dice_improves_on_one_pair(self):
        pair = make_pairs(1, extent=(32, 32), start=0)
        cfg = TrainConfig(epochs=10**6, max_steps=150, learning_rate=1e-3)
        initial = evaluate(build_model(cfg), pair, PHANTOM_CLASSES)[0]["dice_mean"]
        trainer = Trainer(cfg, pair)
        trainer.fit()
        res = evaluate(trainer.model, pair, PHANTOM_CLASSES)[0]
        assert res["dice_mean"] > initial
        assert res["folding_percent"] < 5.0

    def test_self_registration_does_not_lose_overlap(self):
        pairs = make_pairs(2, extent=(32, 32))
        trainer = Trainer(TrainConfig(epochs=10**6, max_steps=60, learning_rate=1e-3), pairs)
        trainer.fit()
        p = pairs[0]
        same = [{"id": "self", "fixed": p["fixed"], "moving": p["fixed"],
                 "fixed_labels": p["fixed_labels"], "moving_labels": p["fixed_labels"]}]
        # the bar is the overlap of the unregistered training pair
        initial = evaluate(build_model(trainer.cfg), pairs[:1], PHANTOM_CLASSES)[0]["dice_mean"]
        assert evaluate(trainer.model, same, PHANTOM_CLASSES)[0]["dice_mean"] >= initial


def test_evaluate_writes_results(cfg, tmp_path):
    model = build_model(cfg)
    pairs = make_pairs(2)
    rows = evaluate(model, pairs, PHANTOM_CLASSES, run_id="r", results_path=tmp_path / "res.csv")
    assert [r["pair_id"] for r in rows] == ["p0", "p1"]
    assert all(r["folding_percent"] == 0.0 for r in rows)
    lines = (tmp_path / "res.csv").read_text().splitlines()
    assert len(lines) == 3
