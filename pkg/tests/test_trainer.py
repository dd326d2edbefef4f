import numpy as np
import pytest

from hlseg import trainer as tr
from hlseg.data import SceneConfig, generate
from hlseg.losses import LossConfig, hl_objective
from hlseg.model import ModelConfig, build_model, forward, load_checkpoint

SIZE = (32, 32)


@pytest.fixture(scope="module")
def scenes():
    return [generate(SceneConfig(image_size=SIZE, seed=3), i) for i in range(8)]


def tiny_cfg(variant="hl", **train):
    cfg = tr.TrainConfig(
        model=ModelConfig(base_channels=4, depth=2, head_channels=6, input_size=SIZE, convs_per_stage=1),
        loss=LossConfig(variant=variant, ohem_min_kept=64),
        iterations=6,
        batch_size=2,
        snapshot_every=3,
        dump_every=2,
        log_every=100,
    )
    for k, v in train.items():
        setattr(cfg, k, v)
    return cfg


def load_group(path, group):
    p = load_checkpoint(path)
    return {n: p[n].data for n in p.names(group)}


class TestSchedule:
    def test_endpoints(self):
        assert tr.poly_lr(0.01, 0, 2000, 0.9) == 0.01
        assert tr.poly_lr(0.01, 2000, 2000, 0.9) == 0.0
        assert tr.poly_lr(0.01, 1999, 2000, 0.9) < 1e-4

    def test_monotone(self):
        lrs = [tr.poly_lr(0.01, i, 100, 0.9) for i in range(101)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_batch_plan_deterministic(self):
        assert tr.batch_plan(1, 5, 250, 4) == tr.batch_plan(1, 5, 250, 4)
        assert tr.batch_plan(1, 5, 250, 4) != tr.batch_plan(1, 6, 250, 4)
        idx, seeds = tr.batch_plan(2, 0, 10, 50)
        assert min(idx) >= 0 and max(idx) < 10 and len(set(seeds)) == 50


class TestSGD:
    def test_heavy_ball(self):
        p = build_model(ModelConfig(base_channels=1, depth=1, head_channels=1, input_size=(8, 8), num_classes=2), 0)
        name = p.names()[0]
        w0 = p[name].data.copy()
        opt = tr.SGD(p, momentum=0.5)
        g = np.ones_like(w0)
        p[name].grad = g
        opt.step(0.1)
        p[name].grad = g
        opt.step(0.1)
        # v1 = g, v2 = 0.5 g + g
        np.testing.assert_allclose(p[name].data, w0 - 0.1 * g - 0.15 * g, rtol=1e-6)

    def test_skips_params_without_grad(self):
        p = build_model(ModelConfig(base_channels=1, depth=1, head_channels=1, input_size=(8, 8), num_classes=2), 0)
        before = {n: p[n].data.copy() for n in p.names()}
        tr.SGD(p, 0.9).step(1.0)
        assert all(np.array_equal(before[n], p[n].data) for n in p.names())


class TestConfig:
    def test_round_trip(self):
        cfg = tiny_cfg()
        cfg.loss.alpha = 0.25
        cfg.augment = False
        again = tr.parse_config(tr.format_config(cfg))
        assert tr.format_config(again) == tr.format_config(cfg)
        assert again.model.input_size == SIZE

    def test_comments_and_blank_lines(self):
        cfg = tr.parse_config("# header\n\nloss.variant = ce  # trailing\ntrain.seed=9\n")
        assert cfg.loss.variant == "ce" and cfg.seed == 9

    def test_unknown_key(self):
        with pytest.raises(tr.ConfigError, match="line|:1:"):
            tr.parse_config("loss.gamma = 2\n", source="x.cfg")

    def test_bad_value(self):
        with pytest.raises(tr.ConfigError, match="train.iterations"):
            tr.parse_config("train.iterations = many\n")

    def test_every_key_listed(self):
        text = tr.format_config(tr.TrainConfig())
        assert len(text.splitlines()) == len(tr.CONFIG_KEYS)
        for key in ("model.num_classes", "loss.c", "loss.alpha", "data.train_dir", "train.lr0", "train.seed"):
            assert key in tr.CONFIG_KEYS

    def test_validate(self):
        with pytest.raises(tr.ConfigError):
            tiny_cfg(iterations=0).validate()


class TestTrain:
    def test_run_directory(self, tmp_path, scenes):
        tr.train(tiny_cfg(), tmp_path / "run", scenes, scenes[0])
        run = tmp_path / "run"
        assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["iter_000000", "iter_000003", "iter_000006"]
        maps = sorted(p.name for p in (run / "maps").iterdir())
        assert maps == [f"{k}_{i:06d}.hlt" for k in "HL" for i in (0, 2, 4, 6)]
        log = tr.read_log(run)
        assert list(log["iter"]) == list(range(6))
        assert log["lr"][0] == 0.01
        np.testing.assert_allclose(log["L_f"], log["L_s"] + 0.01 * log["L_h"], rtol=1e-5)
        assert tr.load_config(run / "config.txt").loss.variant == "hl"

    def test_refuses_existing_run(self, tmp_path, scenes):
        (tmp_path / "run").mkdir()
        (tmp_path / "run" / "x").write_text("")
        with pytest.raises(FileExistsError):
            tr.train(tiny_cfg(), tmp_path / "run", scenes, scenes[0])

    def test_alpha_zero_freezes_hl_head(self, tmp_path, scenes):
        cfg = tiny_cfg()
        cfg.loss.alpha = 0.0
        tr.train(cfg, tmp_path / "run", scenes, scenes[0])
        init = load_group(tmp_path / "run/checkpoints/iter_000000", "hl_head")
        for ck in ("checkpoints/iter_000003", "checkpoints/iter_000006", "final"):
            got = load_group(tmp_path / "run" / ck, "hl_head")
            assert all(got[n].tobytes() == init[n].tobytes() for n in init)
        moved = load_group(tmp_path / "run/final", "backbone")
        start = load_group(tmp_path / "run/checkpoints/iter_000000", "backbone")
        assert any(not np.array_equal(moved[n], start[n]) for n in start)

    def test_hl_run_updates_every_group(self, tmp_path, scenes):
        tr.train(tiny_cfg(), tmp_path / "run", scenes, scenes[0])
        for group in ("backbone", "seg_head", "hl_head"):
            a = load_group(tmp_path / "run/checkpoints/iter_000000", group)
            b = load_group(tmp_path / "run/final", group)
            assert any(not np.array_equal(a[n], b[n]) for n in a)

    @pytest.mark.parametrize("variant", ["ce", "balanced", "ohem", "focal"])
    def test_baselines_never_touch_hl_head(self, tmp_path, scenes, variant):
        tr.train(tiny_cfg(variant), tmp_path / "run", scenes, scenes[0])
        init = load_group(tmp_path / "run/checkpoints/iter_000000", "hl_head")
        final = load_group(tmp_path / "run/final", "hl_head")
        assert all(final[n].tobytes() == init[n].tobytes() for n in init)
        assert not list((tmp_path / "run/maps").glob("H_*"))
        assert np.all(np.isnan(tr.read_log(tmp_path / "run")["L_h"]))

    def test_deterministic(self, tmp_path, scenes):
        for name in ("a", "b"):
            tr.train(tiny_cfg(), tmp_path / name, scenes, scenes[0])
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                twin = tmp_path / "b" / f.relative_to(tmp_path / "a")
                assert f.read_bytes() == twin.read_bytes(), f

    def test_batches_replay(self, tmp_path, scenes):
        cfg = tiny_cfg()
        tr.train(cfg, tmp_path / "run", scenes, scenes[0])
        for it, idx, seeds in tr.read_batches(tmp_path / "run"):
            assert (idx, seeds) == tr.batch_plan(cfg.seed, it, len(scenes), cfg.batch_size)
        # the recorded plan regenerates the exact batch
        it, idx, seeds = tr.read_batches(tmp_path / "run")[3]
        a = tr.make_batch(scenes, idx, seeds, cfg)
        b = tr.make_batch(scenes, *tr.batch_plan(cfg.seed, it, len(scenes), cfg.batch_size), cfg)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_divergence(self, tmp_path, scenes):
        cfg = tiny_cfg("ce", lr0=1e12, iterations=20, snapshot_every=1)
        with np.errstate(all="ignore"), pytest.raises(tr.TrainingDiverged) as exc:
            tr.train(cfg, tmp_path / "run", scenes, scenes[0])
        it = exc.value.iteration
        assert 0 < it < 20
        assert exc.value.checkpoint.endswith(f"iter_{it:06d}")
        assert "non-finite" in str(exc.value)


class TestSingleBackward:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_two_backwards(self, seed, scenes):
        cfg = tiny_cfg()
        alpha = 0.3
        images, labels = tr.make_batch(scenes, [seed, seed + 1], [seed, seed + 7], cfg)

        def grads(which):
            p = build_model(cfg.model, seed)
            out = forward(p, images)
            L_f, L_s, L_h, _, _ = hl_objective(out.seg_logits, out.hardness_raw, labels, 0.1, alpha)
            {"f": L_f, "s": L_s, "h": L_h * alpha}[which].backward()
            return {n: (np.zeros_like(p[n].data) if p[n].grad is None else p[n].grad) for n in p.names()}

        whole, seg, hl = grads("f"), grads("s"), grads("h")
        for n in whole:
            # the two paths touch disjoint parameter sets, so the sum is exact
            assert not (seg[n].any() and hl[n].any())
            np.testing.assert_array_equal(whole[n], seg[n] + hl[n])


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, scenes):
    run = tmp_path_factory.mktemp("ck") / "run"
    tr.train(tiny_cfg(), run, scenes, scenes[0])
    return run / "final"


class TestContinue:
    def test_zero_iters_matches_checkpoint(self, checkpoint, scenes):
        L, H = tr.continue_train(checkpoint, scenes[5], 0)
        assert len(L) == len(H) == 1
        L0, H0 = tr.probe_maps(load_checkpoint(checkpoint), scenes[5], LossConfig())
        assert H[0].tobytes() == H0.tobytes() and L[0].tobytes() == L0.tobytes()

    def test_series(self, checkpoint, scenes, tmp_path):
        L, H = tr.continue_train(checkpoint, scenes[5], 4, out_dir=tmp_path / "maps")
        assert len(L) == len(H) == 5
        assert len(list((tmp_path / "maps").glob("H_*.hlt"))) == 5
        valid = scenes[5].labels != 255
        for h in H:
            assert abs(h[valid].sum() - 1) < 1e-5
        assert L[-1][valid].mean() < L[0][valid].mean()

    def test_does_not_touch_checkpoint(self, checkpoint, scenes):
        before = {p.name: p.read_bytes() for p in checkpoint.iterdir()}
        tr.continue_train(checkpoint, scenes[5], 2)
        assert before == {p.name: p.read_bytes() for p in checkpoint.iterdir()}

    def test_needs_hl_head(self, checkpoint, scenes):
        with pytest.raises(ValueError):
            tr.continue_train(load_checkpoint(checkpoint).without("hl_head"), scenes[5], 1)
