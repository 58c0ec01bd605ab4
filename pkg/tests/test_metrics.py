import numpy as np
import pytest

from refvdm.data import generate_sprite_dataset, generate_sprite_sample, subject_highlight
from refvdm.metrics import (
    METRIC_COLUMNS,
    ToyEmbedder,
    block_flow,
    dynamic_degree,
    evaluate_run,
    subject_similarity,
    temporal_consistency,
    text_alignment,
)


def _textured(h=64, w=64, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 0.8, size=(h, w, 3)).astype(np.float32)


def _sprite_frame(idx=0, seed=7):
    s = generate_sprite_sample(idx, seed=seed)
    return s


class TestToyEmbedder:
    def test_unit_norm(self):
        emb = ToyEmbedder()
        v = emb.embed(_textured())
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-6)

    def test_self_similarity_is_one(self):
        emb = ToyEmbedder()
        s = _sprite_frame()
        assert subject_similarity(s.video[:1], s.video[0], emb) == pytest.approx(1.0, abs=1e-6)

    def test_solid_color_probes_orthogonal(self):
        # pure-color images land in disjoint color bins and carry no gradient signal
        emb = ToyEmbedder()
        red = np.zeros((32, 32, 3), np.float32)
        red[..., 0] = 0.3
        blue = np.zeros((32, 32, 3), np.float32)
        blue[..., 2] = 0.8
        a, b = emb.embed(red), emb.embed(blue)
        assert abs(float(a @ b)) < 1e-6

    def test_half_mixture_similarity(self):
        emb = ToyEmbedder()
        red = np.zeros((32, 32, 3), np.float32)
        red[..., 0] = 0.3
        blue = np.zeros((32, 32, 3), np.float32)
        blue[..., 2] = 0.8
        mixed = red.copy()
        mixed[16:] = blue[16:]
        sim_red = float(emb.embed(mixed) @ emb.embed(red))
        sim_blue = float(emb.embed(mixed) @ emb.embed(blue))
        # mixture sits strictly between its parts and is symmetric in them
        assert sim_red == pytest.approx(sim_blue, abs=1e-6)
        assert 0.0 < sim_red < 1.0

    def test_background_excluded(self):
        # same subject on different backgrounds embeds identically
        emb = ToyEmbedder()
        s = _sprite_frame(2)
        frame = s.video[0]
        recolored = frame.copy()
        recolored[~s.subject_mask] = np.array([0.05, 0.9, 0.05], np.float32)
        a = emb.embed(subject_highlight(frame, s.subject_mask))
        b = emb.embed(subject_highlight(recolored, s.subject_mask))
        assert float(a @ b) == pytest.approx(1.0, abs=1e-6)

    def test_cosine_bounds_fuzz(self):
        emb = ToyEmbedder()
        rng = np.random.default_rng(3)
        for i in range(50):
            a = emb.embed(rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32))
            b = emb.embed(rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32))
            c = float(a @ b)
            assert -1.0 - 1e-6 <= c <= 1.0 + 1e-6


class TestTemporalConsistency:
    def test_static_video(self):
        emb = ToyEmbedder()
        frame = _textured()
        video = np.stack([frame] * 5)
        assert temporal_consistency(video, emb) == pytest.approx(1.0, abs=1e-6)

    def test_alternating_orthogonal_frames(self):
        emb = ToyEmbedder()
        red = np.zeros((32, 32, 3), np.float32)
        red[..., 0] = 0.3
        blue = np.zeros((32, 32, 3), np.float32)
        blue[..., 2] = 0.8
        video = np.stack([red, blue, red, blue])
        assert temporal_consistency(video, emb) == pytest.approx(0.0, abs=1e-6)

    def test_matches_pairwise_loop(self):
        emb = ToyEmbedder()
        s = _sprite_frame(1)
        expected = np.mean(
            [float(emb.embed(s.video[i]) @ emb.embed(s.video[i + 1])) for i in range(s.video.shape[0] - 1)]
        )
        assert temporal_consistency(s.video, emb) == pytest.approx(expected, abs=1e-9)

    def test_single_frame_rejected(self):
        with pytest.raises(ValueError):
            temporal_consistency(_textured()[None], ToyEmbedder())


class TestDynamicDegree:
    def test_static_video_exact_zero(self):
        video = np.stack([_textured()] * 4)
        assert dynamic_degree(video) == 0.0

    def test_two_pixel_translation(self):
        frame = _textured(64, 64, seed=5)
        video = np.stack([np.roll(frame, (0, 2 * i), axis=(0, 1)) for i in range(6)])
        assert dynamic_degree(video) == pytest.approx(2.0, abs=0.5)

    def test_diagonal_translation(self):
        frame = _textured(64, 64, seed=6)
        video = np.stack([np.roll(frame, (i, i), axis=(0, 1)) for i in range(4)])
        assert dynamic_degree(video) == pytest.approx(np.sqrt(2.0), abs=0.5)

    def test_window_clamps_large_motion(self):
        frame = _textured(64, 64, seed=7)
        video = np.stack([np.roll(frame, (0, 20 * i), axis=(0, 1)) for i in range(3)])
        # search window is +/-4 px, so estimates cannot exceed its diagonal
        assert dynamic_degree(video) <= np.sqrt(32.0) + 1e-9

    def test_block_flow_recovers_shift(self):
        frame = _textured(32, 32, seed=8)
        shifted = np.roll(frame, (1, -2), axis=(0, 1))
        flow = block_flow(frame, shifted)
        assert np.all(flow[..., 0] == 1)
        assert np.all(flow[..., 1] == -2)


class TestTextAlignment:
    def test_ground_truth_scores_one(self):
        for idx in range(8):
            s = generate_sprite_sample(idx, seed=13)
            assert text_alignment(s.video, s.prompt) == pytest.approx(1.0)

    def test_recolored_background_scores_half(self):
        s = generate_sprite_sample(0, seed=13)
        video = s.video.copy()
        for f in range(video.shape[0]):
            m = np.roll(
                s.subject_mask,
                (
                    s.motion.speed * f * {"left": 0, "right": 0, "up": -1, "down": 1}[s.motion.direction],
                    s.motion.speed * f * {"left": -1, "right": 1, "up": 0, "down": 0}[s.motion.direction],
                ),
                axis=(0, 1),
            )
            video[f][~m] = np.array([0.9, 0.1, 0.9], np.float32)
        assert text_alignment(video, s.prompt) == pytest.approx(0.5)

    def test_reversed_motion_scores_half(self):
        s = generate_sprite_sample(0, seed=13)
        assert text_alignment(s.video[::-1].copy(), s.prompt) == pytest.approx(0.5)

    def test_score_in_unit_interval_fuzz(self):
        rng = np.random.default_rng(4)
        s = generate_sprite_sample(0, seed=13)
        for _ in range(10):
            video = rng.uniform(0, 1, size=s.video.shape).astype(np.float32)
            assert 0.0 <= text_alignment(video, s.prompt) <= 1.0


@pytest.fixture(scope="module")
def tiny_checkpoint():
    from refvdm.checkpoint import CheckpointMeta
    from refvdm.model import ModelConfig, ToyUNet

    config = ModelConfig(in_channels=12, latent_size=8, channels=(8,), attention_levels=(0,), head_dim=8)
    model = ToyUNet(config, seed=0)
    meta = CheckpointMeta(
        model_config=config,
        schedule={"num_steps": 50, "beta_start": 1e-4, "beta_end": 0.02},
        codec={"patch_size": 2},
        step=0,
    )
    return model, meta


class TestEvaluateRun:
    def test_empty_test_set(self, tmp_path, tiny_checkpoint):
        report = evaluate_run(tiny_checkpoint, [], out_dir=tmp_path)
        assert report.per_sample == []
        assert report.aggregate == {}
        assert (tmp_path / "metrics.csv").exists()

    def test_report_files_and_columns(self, tmp_path, tiny_checkpoint):
        samples = generate_sprite_dataset(2, seed=21, height=16, width=16, num_frames=3)
        report = evaluate_run(tiny_checkpoint, samples, out_dir=tmp_path, steps=2)
        assert len(report.per_sample) == 2
        assert not report.failures
        for row in report.per_sample:
            for col in METRIC_COLUMNS:
                assert np.isfinite(row[col])
        assert (tmp_path / "metrics.png").exists()
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
        for col in METRIC_COLUMNS:
            assert col in header

    def test_deterministic(self, tmp_path, tiny_checkpoint):
        samples = generate_sprite_dataset(2, seed=21, height=16, width=16, num_frames=3)
        r1 = evaluate_run(tiny_checkpoint, samples, out_dir=tmp_path / "a", steps=2)
        r2 = evaluate_run(tiny_checkpoint, samples, out_dir=tmp_path / "b", steps=2)
        assert r1.aggregate == r2.aggregate
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_failing_sample_is_isolated(self, tmp_path, tiny_checkpoint):
        samples = generate_sprite_dataset(2, seed=21, height=16, width=16, num_frames=3)
        bad = generate_sprite_sample(0, seed=21, height=24, width=24, num_frames=3)  # wrong size
        report = evaluate_run(tiny_checkpoint, [samples[0], bad, samples[1]], steps=2)
        assert len(report.per_sample) == 2
        assert len(report.failures) == 1
        assert report.failures[0]["sample_id"] == 1
