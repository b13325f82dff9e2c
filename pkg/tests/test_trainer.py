import math

import numpy as np
import pytest
import torch

from alignlab import trainer
from alignlab.checkpoint import (
    CheckpointError,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
    tensor_digest,
)
from alignlab.config import config_hash
from alignlab.trainer import (
    AdamW,
    StageConfig,
    adamw_step,
    apply_freeze_schedule,
    cosine_lr,
    decay_for,
    epoch_permutation,
    smoothed_losses,
)


class TestCosineLR:
    def test_warmup_end_is_base(self):
        # 1000 steps, warmup 0.03 -> 30 warmup steps
        assert cosine_lr(30, 1000, 1e-3, 0.03) == pytest.approx(1e-3, abs=0)

    def test_cosine_midpoint_is_half(self):
        assert cosine_lr(30 + 485, 1000, 1e-3, 0.03) == pytest.approx(0.5e-3, rel=1e-12)

    def test_final_step_is_zero(self):
        assert cosine_lr(1000, 1000, 1e-3, 0.03) == pytest.approx(0.0, abs=1e-18)

    def test_warmup_is_linear(self):
        for step in range(30):
            assert cosine_lr(step, 1000, 1e-3, 0.03) == pytest.approx(1e-3 * step / 30)

    def test_step_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(1001, 1000, 1e-3, 0.03)
        with pytest.raises(ValueError):
            cosine_lr(-1, 1000, 1e-3, 0.03)

    def test_piecewise_continuity_bound(self):
        base, total, warmup = 2e-3, 400, 0.05
        warmup_steps = int(round(warmup * total))
        bound = base * max(1.0 / warmup_steps, math.pi / total)
        values = [cosine_lr(s, total, base, warmup) for s in range(total + 1)]
        for a, b in zip(values, values[1:]):
            assert abs(b - a) <= bound + 1e-15

    def test_zero_warmup(self):
        assert cosine_lr(0, 100, 1e-3, 0.0) == pytest.approx(1e-3)


class TestAdamWStep:
    def test_zero_grad_no_decay_keeps_params(self):
        p = torch.tensor([1.5, -2.0])
        m, v = torch.zeros(2), torch.zeros(2)
        adamw_step(p, torch.zeros(2), m, v, t=1, lr=0.1, weight_decay=0.0)
        assert torch.equal(p, torch.tensor([1.5, -2.0]))

    def test_zero_grad_with_decay_shrinks(self):
        p = torch.tensor([2.0], dtype=torch.float64)
        m, v = torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64)
        adamw_step(p, torch.zeros(1, dtype=torch.float64), m, v, t=1, lr=0.1, weight_decay=0.01)
        assert float(p) == pytest.approx(2.0 * (1 - 0.1 * 0.01), rel=1e-15)

    def test_two_step_hand_recursion(self):
        beta1, beta2, eps, lr, wd = 0.9, 0.999, 1e-8, 0.05, 0.02
        theta = 0.7
        grads = [0.3, -0.4]
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            theta = theta - lr * (m_hat / (math.sqrt(v_hat) + eps) + wd * theta)

        p = torch.tensor([0.7], dtype=torch.float64)
        pm, pv = torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64)
        for t, g in enumerate(grads, start=1):
            adamw_step(p, torch.tensor([g], dtype=torch.float64), pm, pv, t=t,
                       lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=wd)
        assert float(p) == pytest.approx(theta, abs=1e-12)

    def test_random_instances_match_numpy_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            shape = tuple(rng.integers(1, 5, size=rng.integers(1, 3)))
            theta = rng.normal(size=shape)
            g1, g2 = rng.normal(size=shape), rng.normal(size=shape)
            lr, wd = float(rng.uniform(1e-4, 1e-1)), float(rng.uniform(0, 0.05))
            beta1, beta2, eps = 0.9, 0.999, 1e-8

            m = np.zeros(shape)
            v = np.zeros(shape)
            ref = theta.copy()
            for t, g in enumerate((g1, g2), start=1):
                m = beta1 * m + (1 - beta1) * g
                v = beta2 * v + (1 - beta2) * g * g
                ref -= lr * ((m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps) + wd * ref)

            p = torch.tensor(theta, dtype=torch.float64)
            pm, pv = torch.zeros(p.shape, dtype=torch.float64), torch.zeros(p.shape, dtype=torch.float64)
            for t, g in enumerate((g1, g2), start=1):
                adamw_step(p, torch.tensor(g, dtype=torch.float64), pm, pv, t=t,
                           lr=lr, weight_decay=wd)
            np.testing.assert_allclose(p.numpy(), ref, rtol=1e-12, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adamw_step(torch.zeros(2), torch.zeros(3), torch.zeros(2), torch.zeros(2), 1, 0.1)

    def test_decay_exemptions(self):
        assert decay_for("lm.blocks.0.qkv.bias", 0.01) == 0.0
        assert decay_for("align.table", 0.01) == 0.0
        assert decay_for("gate.b", 0.01) == 0.0
        assert decay_for("temperature", 0.01) == 0.0
        assert decay_for("lm.blocks.0.qkv.weight", 0.01) == 0.01
        assert decay_for("proj.weight", 0.01) == 0.01


class TestStageConfig:
    def test_pretrain_trainable_set(self):
        cfg = StageConfig("pretrain", 1e-3, 8, 10, 0.0, 0)
        assert cfg.trainable_prefixes == ("proj.", "align.table")

    def test_finetune_trainable_set(self):
        cfg = StageConfig("finetune", 1e-4, 8, 10, 0.0, 0, gating_mode="local+global")
        assert cfg.trainable_prefixes == ("proj.", "lm.", "gate.")

    def test_gate_excluded_without_gradient_path(self):
        for mode in ("global", "average"):
            cfg = StageConfig("finetune", 1e-4, 8, 10, 0.0, 0, gating_mode=mode)
            assert "gate." not in cfg.trainable_prefixes

    def test_validation(self):
        with pytest.raises(ValueError):
            StageConfig("warmup", 1e-3, 8, 10, 0.0, 0)
        with pytest.raises(ValueError):
            StageConfig("finetune", 1e-3, 8, 10, 0.0, 0, gating_mode="both")
        with pytest.raises(ValueError):
            StageConfig("pretrain", 1e-3, 0, 10, 0.0, 0)

    def test_freeze_schedule_applied(self, tiny_cfg):
        stack = trainer.build_stack(tiny_cfg)
        trainable = apply_freeze_schedule(stack, StageConfig("pretrain", 1e-3, 8, 10, 0.0, 0))
        assert set(trainable) == {"proj.weight", "proj.bias", "align.table"}
        for name, tensor in stack.named_tensor_map().items():
            assert tensor.requires_grad == (name in trainable)


class TestEpochPermutation:
    def test_pure_function(self):
        a = epoch_permutation(3, "pretrain", 5, 100)
        b = epoch_permutation(3, "pretrain", 5, 100)
        assert np.array_equal(a, b)
        assert sorted(a.tolist()) == list(range(100))

    def test_distinct_across_epochs_and_stages(self):
        a = epoch_permutation(3, "pretrain", 0, 100)
        b = epoch_permutation(3, "pretrain", 1, 100)
        c = epoch_permutation(3, "finetune", 0, 100)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestSmoothedLosses:
    def test_window_means(self):
        losses = [2.0] * 50 + [1.0] * 100
        init, fin = smoothed_losses(losses, window=50)
        assert init == pytest.approx(2.0)
        assert fin == pytest.approx(1.0)

    def test_short_series(self):
        init, fin = smoothed_losses([3.0, 1.0], window=50)
        assert init == fin == pytest.approx(2.0)


class TestCheckpointArchive:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "b.weight": rng.normal(size=(3, 4)).astype(np.float32),
            "a.bias": rng.normal(size=(7,)).astype(np.float32),
        }
        meta = {"stage": "pretrain", "config_hash": "x", "rng_state": {"s": 1}, "step": 3}
        d1 = tmp_path / "c1"
        save_checkpoint(d1, tensors, {"b.weight": True}, meta)
        ck = load_checkpoint(d1)
        d2 = tmp_path / "c2"
        save_checkpoint(d2, ck.tensors, ck.frozen, ck.meta)
        assert (d1 / "manifest.json").read_bytes() == (d2 / "manifest.json").read_bytes()
        assert (d1 / "tensors.bin").read_bytes() == (d2 / "tensors.bin").read_bytes()
        assert ck.frozen["b.weight"] is True and ck.frozen["a.bias"] is False

    def test_missing_tensor_error(self, tmp_path):
        save_checkpoint(tmp_path / "c", {"x": np.zeros(2, np.float32)}, {}, {"stage": "s"})
        ck = load_checkpoint(tmp_path / "c")
        with pytest.raises(CheckpointError):
            ck.require("y")

    def test_missing_manifest_error(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope")


class TestTrainingRuns:
    def test_zero_step_run_equals_init(self, tiny_cfg, tiny_pairs, tmp_path):
        cfg = dict(tiny_cfg, pretrain_steps=0)
        result = trainer.pretrain(tiny_pairs, cfg, tmp_path / "ckpt")
        ck = load_checkpoint(result.checkpoint_dir)
        init_stack = trainer.build_stack(cfg)
        for name, tensor in init_stack.named_tensor_map().items():
            assert tensor_digest(ck.tensors[name]) == tensor_digest(tensor.detach().numpy()), name
        assert result.rows == []

    def test_pretrain_freeze_contract(self, tiny_cfg, tiny_pairs, tmp_path):
        result = trainer.pretrain(tiny_pairs, tiny_cfg, tmp_path / "ckpt")
        ck = load_checkpoint(result.checkpoint_dir)
        init_stack = trainer.build_stack(tiny_cfg)
        init = {n: t.detach().numpy() for n, t in init_stack.named_tensor_map().items()}
        for name in init:
            if name.startswith(("vision.", "lm.", "gate.")):
                assert tensor_digest(ck.tensors[name]) == tensor_digest(init[name]), name
                assert ck.frozen[name], name
        for name in ("proj.weight", "proj.bias", "align.table"):
            assert tensor_digest(ck.tensors[name]) != tensor_digest(init[name]), name
            assert not ck.frozen[name]

    def test_finetune_freeze_contract_and_modes(self, tiny_cfg, tiny_pairs, tiny_instructions, tmp_path):
        stage1 = trainer.pretrain(tiny_pairs, tiny_cfg, tmp_path / "stage1")
        ck1 = load_checkpoint(stage1.checkpoint_dir)
        stage2 = trainer.finetune(
            tiny_instructions, tiny_cfg, tmp_path / "stage2", stage1.checkpoint_dir
        )
        ck2 = load_checkpoint(stage2.checkpoint_dir)
        for name in ck1.tensors:
            if name.startswith("vision.") or name == "align.table":
                assert tensor_digest(ck2.tensors[name]) == tensor_digest(ck1.tensors[name]), name
        assert tensor_digest(ck2.tensors["gate.W"]) != tensor_digest(ck1.tensors["gate.W"])
        assert ck2.meta["gating_mode"] == "local+global"

        global_run = trainer.finetune(
            tiny_instructions, tiny_cfg, tmp_path / "stage2g", stage1.checkpoint_dir,
            gating_mode="global",
        )
        ckg = load_checkpoint(global_run.checkpoint_dir)
        assert tensor_digest(ckg.tensors["gate.W"]) == tensor_digest(ck1.tensors["gate.W"])
        assert "optim.m.gate.W" not in ckg.tensors

        average_run = trainer.finetune(
            tiny_instructions, tiny_cfg, tmp_path / "stage2a", stage1.checkpoint_dir,
            gating_mode="average",
        )
        cka = load_checkpoint(average_run.checkpoint_dir)
        assert tensor_digest(cka.tensors["gate.W"]) == tensor_digest(ck1.tensors["gate.W"])

    def test_finetune_requires_pretrain_stage(self, tiny_cfg, tiny_instructions, tmp_path):
        lm = trainer.warmstart_lm(tiny_instructions, tiny_cfg, tmp_path / "lm")
        with pytest.raises(CheckpointError):
            trainer.finetune(tiny_instructions, tiny_cfg, tmp_path / "ft", lm.checkpoint_dir)

    def test_pretrain_requires_levels(self, tiny_cfg, tmp_path):
        from alignlab.synthdata import generate_pair_shard

        records = generate_pair_shard(tiny_cfg["seed"], 8)
        with pytest.raises(ValueError):
            trainer.pretrain(records, tiny_cfg, tmp_path / "ckpt")

    def test_determinism_byte_identical(self, tiny_cfg, tiny_pairs, tmp_path):
        a = trainer.pretrain(tiny_pairs, tiny_cfg, tmp_path / "a")
        b = trainer.pretrain(tiny_pairs, tiny_cfg, tmp_path / "b")
        assert checkpoint_hash(a.checkpoint_dir) == checkpoint_hash(b.checkpoint_dir)
        assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()

    def test_resume_equals_uninterrupted(self, tiny_cfg, tiny_pairs, tmp_path):
        full = trainer.pretrain(tiny_pairs, tiny_cfg, tmp_path / "full")
        partial = trainer.pretrain(tiny_pairs, tiny_cfg, tmp_path / "partial", stop_at_step=7)
        resumed = trainer.resume_training(
            partial.checkpoint_dir, tiny_pairs, tiny_cfg, tmp_path / "resumed"
        )
        assert checkpoint_hash(resumed.checkpoint_dir) == checkpoint_hash(full.checkpoint_dir)
        assert partial.rows + resumed.rows == full.rows

    def test_resume_config_mismatch(self, tiny_cfg, tiny_pairs, tmp_path):
        partial = trainer.pretrain(tiny_pairs, tiny_cfg, tmp_path / "partial", stop_at_step=5)
        other = dict(tiny_cfg, pretrain_lr=5e-4)
        with pytest.raises(CheckpointError):
            trainer.resume_training(partial.checkpoint_dir, tiny_pairs, other, tmp_path / "r")

    def test_finetune_resume_equals_uninterrupted(self, tiny_cfg, tiny_pairs, tiny_instructions, tmp_path):
        stage1 = trainer.pretrain(tiny_pairs, tiny_cfg, tmp_path / "s1")
        full = trainer.finetune(tiny_instructions, tiny_cfg, tmp_path / "full", stage1.checkpoint_dir)
        partial = trainer.finetune(
            tiny_instructions, tiny_cfg, tmp_path / "part", stage1.checkpoint_dir, stop_at_step=9
        )
        resumed = trainer.resume_training(
            partial.checkpoint_dir, tiny_instructions, tiny_cfg, tmp_path / "res"
        )
        assert checkpoint_hash(resumed.checkpoint_dir) == checkpoint_hash(full.checkpoint_dir)

    def test_random_table_reinit(self, tiny_cfg, tiny_pairs, tiny_instructions, tmp_path):
        stage1 = trainer.pretrain(tiny_pairs, tiny_cfg, tmp_path / "s1")
        ck1 = load_checkpoint(stage1.checkpoint_dir)
        random_run = trainer.finetune(
            tiny_instructions, tiny_cfg, tmp_path / "rand", stage1.checkpoint_dir,
            reinit_table_seed=tiny_cfg["seed"] + 1,
        )
        ckr = load_checkpoint(random_run.checkpoint_dir)
        assert tensor_digest(ckr.tensors["align.table"]) != tensor_digest(ck1.tensors["align.table"])
        assert ckr.meta["random_table"] is True

    def test_loss_log_format(self, tiny_cfg, tiny_pairs, tmp_path):
        result = trainer.pretrain(tiny_pairs, tiny_cfg, tmp_path / "ckpt")
        lines = (tmp_path / "ckpt" / "losses.csv").read_text().strip().split("\n")
        assert lines[0] == "step,stage,lr,loss"
        assert len(lines) == 1 + tiny_cfg["pretrain_steps"]
        first = lines[1].split(",")
        assert first[0] == "0" and first[1] == "pretrain"

    def test_batched_loss_matches_single_sample_assembly(self, tiny_cfg, tiny_pairs, tiny_instructions):
        # The vectorized training batch must agree with the per-sample
        # assembly operations bit for bit.
        from alignlab.aligncore import (
            alignment_slot_embedding,
            assemble_finetune_sequence,
            assemble_pretrain_sequence,
        )
        from alignlab.model import lm_loss
        from alignlab.synthdata import EOS_ID, encode_tokens

        stack = trainer.build_stack(tiny_cfg)

        rec = tiny_pairs[3]
        data = trainer.prepare_pretrain_dataset(stack, [rec])
        stage_cfg = StageConfig("pretrain", 1e-3, 1, 1, 0.0, 0)
        batched = trainer.batch_loss(stack, data, np.array([0]), stage_cfg)
        image_tokens = stack.project(data.vision_feats[0])
        text_ids = torch.tensor(encode_tokens(rec["caption"]) + [EOS_ID])
        seq = assemble_pretrain_sequence(
            stack.align_table.lookup(rec["level"]), image_tokens,
            stack.lm.embed_tokens(text_ids), text_ids,
        )
        single = lm_loss(
            stack.lm(seq.embeds.unsqueeze(0)),
            seq.token_ids.unsqueeze(0),
            seq.loss_mask.unsqueeze(0),
        )
        assert torch.equal(batched, single)

        rec = tiny_instructions[5]
        data = trainer.prepare_finetune_dataset(stack, [rec])
        stage_cfg = StageConfig("finetune", 1e-4, 1, 1, 0.0, 0, gating_mode="local+global")
        batched = trainer.batch_loss(stack, data, np.array([0]), stage_cfg)
        image_tokens = stack.project(data.vision_feats[0])
        instr_ids = torch.tensor(encode_tokens(rec["instruction"]))
        answer_ids = torch.tensor(encode_tokens(rec["answer"]) + [EOS_ID])
        slot = alignment_slot_embedding(
            stack.align_table, stack.gate,
            stack.lm.embed_tokens(instr_ids).mean(dim=0),
            image_tokens.mean(dim=0),
            "local+global",
        )
        seq = assemble_finetune_sequence(
            slot, image_tokens,
            stack.lm.embed_tokens(instr_ids), instr_ids,
            stack.lm.embed_tokens(answer_ids), answer_ids,
        )
        single = lm_loss(
            stack.lm(seq.embeds.unsqueeze(0)),
            seq.token_ids.unsqueeze(0),
            seq.loss_mask.unsqueeze(0),
        )
        assert torch.allclose(batched, single, atol=1e-7, rtol=0)

    def test_lm_warm_start_loads_into_stack(self, tiny_cfg, tiny_pairs, tiny_instructions, tmp_path):
        lm = trainer.warmstart_lm(tiny_pairs + tiny_instructions, tiny_cfg, tmp_path / "lm")
        ck_lm = load_checkpoint(lm.checkpoint_dir)
        assert ck_lm.meta["stage"] == "lmtext"
        stack = trainer.build_stack(tiny_cfg, lm_ckpt_dir=lm.checkpoint_dir)
        for name, tensor in stack.named_tensor_map().items():
            if name.startswith("lm."):
                assert tensor_digest(tensor.detach().numpy()) == tensor_digest(ck_lm.tensors[name])
        with pytest.raises(CheckpointError):
            trainer.build_stack(tiny_cfg, lm_ckpt_dir=tmp_path / "lm" / "missing")
