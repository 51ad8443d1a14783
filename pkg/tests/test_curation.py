import numpy as np
import pytest

from vidflow.curation import (
    ASPECT_BUCKETS,
    ClipEmbedder,
    ClipRecord,
    CurationConfig,
    FlowField,
    StubAestheticScorer,
    assign_bucket,
    detect_scene_cuts,
    estimate_flow,
    fit_background_transform,
    kmeans_dedup,
    laplacian_blur_score,
    motion_scores,
    pairwise_dedup,
    read_manifest,
    run_curation,
    select_top_percentile,
    split_clips,
    write_manifest,
)
from vidflow.errors import ConfigError, ContractError
from vidflow.harness.toydata import (
    build_curation_corpus,
    checkerboard,
    constant_video,
    crossfade,
    gaussian_blur_frame,
    moving_square_video,
    panning_video,
    texture_rgb,
)
from vidflow.rng import Rng


class TestSceneCuts:
    def test_constant_video_no_cuts(self):
        assert detect_scene_cuts(constant_video(20, 8, 8)) == []

    def test_hard_cut_exact_frame(self):
        video = np.concatenate([constant_video(7, 8, 8, (0, 0, 0)),
                                constant_video(8, 8, 8, (1, 1, 1))])
        assert detect_scene_cuts(video) == [7]

    def test_crossfade_suppressed(self):
        rng = Rng(0)
        a = np.repeat(texture_rgb(rng.stream("a"), 16, 16)[None], 10, axis=0)
        b = np.repeat(texture_rgb(rng.stream("b"), 16, 16)[None], 10, axis=0)
        video = crossfade(a, b, 20)
        assert detect_scene_cuts(video) == []

    def test_shift_equivariance(self):
        rng = Rng(1)
        a = np.repeat(texture_rgb(rng.stream("a"), 8, 8, lo=0.05, hi=0.4)[None],
                      9, axis=0)
        b = np.repeat(texture_rgb(rng.stream("b"), 8, 8, lo=0.6, hi=0.95)[None],
                      9, axis=0)
        video = np.concatenate([a, b])
        base = detect_scene_cuts(video)
        assert base == [9]
        for j in (1, 3, 5):
            prefix = np.repeat(video[:1], j, axis=0)
            shifted = detect_scene_cuts(np.concatenate([prefix, video]))
            assert shifted == [c + j for c in base]

    def test_needs_two_frames(self):
        with pytest.raises(ContractError):
            detect_scene_cuts(constant_video(1, 8, 8))


class TestSplitClips:
    def test_greedy_six_plus_four(self):
        assert split_clips(100, [], fps=10) == [(0, 60), (60, 100)]

    def test_below_minimum_dropped(self):
        assert split_clips(20, [], fps=10) == []

    def test_exact_six_seconds(self):
        assert split_clips(60, [], fps=10) == [(0, 60)]

    def test_respects_cuts(self):
        spans = split_clips(100, [50], fps=10)
        assert spans == [(0, 50), (50, 100)]

    def test_all_durations_in_range(self):
        spans = split_clips(137, [41, 90], fps=8.0)
        for a, b in spans:
            assert 3.0 <= (b - a) / 8.0 <= 6.0


class TestBlurScore:
    def test_constant_frame_zero(self):
        assert laplacian_blur_score(np.full((3, 8, 8), 0.5)) == 0.0

    def test_checkerboard_sharper_than_blurred(self):
        sharp = checkerboard(16, 16)
        blurred = gaussian_blur_frame(sharp, 1.0)
        assert laplacian_blur_score(sharp) > laplacian_blur_score(blurred)

    def test_blur_monotone_in_sigma(self):
        sharp = checkerboard(24, 24)
        scores = [laplacian_blur_score(gaussian_blur_frame(sharp, s))
                  for s in (0.5, 1.0, 2.0, 3.0)]
        assert scores == sorted(scores, reverse=True)

    def test_single_white_pixel_hand_enumeration(self):
        frame = np.zeros((5, 5))
        frame[2, 2] = 1.0
        # interior Laplacian responses: -4 at center, +1 at its 4 neighbors
        values = np.zeros(9)
        values[4] = -4.0
        values[[1, 3, 5, 7]] = 1.0
        expected = values.var()
        assert abs(laplacian_blur_score(frame) - expected) < 1e-12

    def test_too_small_frame(self):
        with pytest.raises(ContractError):
            laplacian_blur_score(np.zeros((2, 2)))


class TestFlow:
    def test_identical_frames_zero_field(self):
        frame = texture_rgb(Rng(2), 16, 16)
        flow = estimate_flow(frame, frame)
        assert np.array_equal(flow.displacement, np.zeros((2, 16, 16)))

    def test_known_shift_recovered(self):
        frame = texture_rgb(Rng(3), 24, 24)
        shifted = np.roll(frame, 3, axis=2)
        flow = estimate_flow(frame, shifted, block=8, radius=4)
        interior = flow.displacement[0, :, 8:16]
        assert np.median(interior) == 3.0

    def test_radius_clamps_estimate(self):
        frame = texture_rgb(Rng(4), 24, 24)
        shifted = np.roll(frame, 6, axis=2)
        flow = estimate_flow(frame, shifted, block=8, radius=2)
        assert np.max(np.abs(flow.displacement)) <= 2.0

    def test_dims_must_divide(self):
        with pytest.raises(Exception, match="divisible"):
            estimate_flow(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)), block=8)


class TestBackgroundFit:
    def test_pure_translation(self):
        disp = np.zeros((2, 16, 16))
        disp[0] = 2.0
        fit = fit_background_transform(FlowField(disp))
        assert not fit.singular
        assert np.allclose(fit.params, [[0, 0, 2.0], [0, 0, 0.0]], atol=1e-10)
        pred = fit.predict(16, 16)
        assert np.max(np.abs(pred - disp)) < 1e-10

    def test_rotation_recovered(self):
        h = w = 16
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        cx, cy = (w - 1) / 2, (h - 1) / 2
        theta = 0.05
        rot = np.array([[np.cos(theta) - 1, -np.sin(theta)],
                        [np.sin(theta), np.cos(theta) - 1]])
        dx = rot[0, 0] * (xs - cx) + rot[0, 1] * (ys - cy)
        dy = rot[1, 0] * (xs - cx) + rot[1, 1] * (ys - cy)
        fit = fit_background_transform(FlowField(np.stack([dx, dy])))
        assert np.max(np.abs(fit.params[:, :2] - rot)) < 1e-6

    def test_contaminated_translation_recovered(self):
        disp = np.zeros((2, 24, 24))
        disp[0] = 2.0
        disp[0, 4:11, 4:11] = -3.0  # contradicting foreground ~9% of pixels
        disp[1, 4:11, 4:11] = 4.0
        fit = fit_background_transform(FlowField(disp))
        assert abs(fit.params[0, 2] - 2.0) / 2.0 < 0.05
        assert abs(fit.params[1, 2]) < 0.1

    def test_degenerate_flagged_singular(self):
        fit = fit_background_transform(FlowField(np.full((2, 2, 2), 1.0)),
                                       sample_step=4)
        assert fit.singular
        assert np.array_equal(fit.params, np.zeros((2, 3)))


class TestMotionScores:
    def test_zero_flow_all_zero(self):
        flow = FlowField(np.zeros((2, 16, 16)))
        s = motion_scores(flow, fit_background_transform(flow))
        assert (s.fg, s.bg, s.pretrain, s.post) == (0, 0, 0, 0)

    def test_pan_is_background_dominant(self):
        disp = np.zeros((2, 16, 16))
        disp[0] = 2.0
        s = motion_scores(FlowField(disp), fit_background_transform(FlowField(disp)))
        assert s.fg == 0.0
        assert abs(s.bg - 2.0) < 1e-10
        assert abs(s.pretrain - 1.0) < 1e-10

    def test_moving_object_foreground_dominant(self):
        disp = np.zeros((2, 24, 24))
        disp[0, 8:14, 8:14] = 3.0  # object moving over a static camera
        flow = FlowField(disp)
        s = motion_scores(flow, fit_background_transform(flow))
        assert s.bg < 0.2
        assert abs(s.fg - 3.0) < 0.3
        assert s.post > s.pretrain  # w_fg > 0.5 and fg > bg

    def test_post_vs_pretrain_ordering(self):
        disp = np.zeros((2, 16, 16))
        disp[0] = 1.0  # pan only: fg < bg
        flow = FlowField(disp)
        s = motion_scores(flow, fit_background_transform(flow))
        assert s.post < s.pretrain


class TestKmeansDedup:
    def _two_clusters(self, n_a, n_b):
        a = np.zeros((n_a, 4))
        a[:, 0] = 1.0
        b = np.zeros((n_b, 4))
        b[:, 1] = 1.0
        return np.concatenate([a, b])

    def test_identical_vectors_keep_one(self):
        feats = np.tile(np.array([1.0, 0, 0, 0]), (12, 1))
        for k in (1, 2, 3):
            result = kmeans_dedup(feats, k, 0.95, Rng(5))
            assert result.kept == [0]

    def test_two_orthogonal_clusters_keep_two(self):
        feats = self._two_clusters(10, 10)
        result = kmeans_dedup(feats, 2, 0.95, Rng(6))
        assert len(result.kept) == 2
        kept_labels = {int(result.labels[i]) for i in result.kept}
        assert len(kept_labels) == 2

    def test_denser_cluster_gets_stricter_threshold(self):
        feats = self._two_clusters(100, 10)
        result = kmeans_dedup(feats, 2, 0.95, Rng(7), gamma=0.1)
        dense_label = int(result.labels[0])
        sparse_label = int(result.labels[-1])
        assert result.taus[dense_label] < result.taus[sparse_label]

    def test_unreachable_threshold_keeps_everything(self):
        rng = Rng(8)
        feats = rng.normal((20, 6))
        result = kmeans_dedup(feats, 3, 2.0, rng.stream("km"))
        assert result.kept == list(range(20))

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            kmeans_dedup(np.ones((3, 2)), 0, 0.9, Rng(9))
        with pytest.raises(ConfigError):
            kmeans_dedup(np.ones((3, 2)), 4, 0.9, Rng(9))


class TestPairwiseDedup:
    def test_distinct_kept_at_threshold_one(self):
        rng = Rng(10)
        feats = rng.normal((8, 5))
        assert pairwise_dedup(feats, 1.0) == list(range(8))

    def test_duplicate_dropped(self):
        v = np.array([1.0, 0.0])
        feats = np.stack([v, v, np.array([0.0, 1.0])])
        assert pairwise_dedup(feats, 0.9) == [0, 2]

    def test_chain_rule_greedy(self):
        # a~b and b~c similar, a~c not: b dropped, then c only compared to a
        a = np.array([1.0, 0.0])
        c = np.array([0.0, 1.0])
        b = (a + c) / np.linalg.norm(a + c)
        tau = 0.6  # cos(a,b)=cos(b,c)=0.707 >= tau; cos(a,c)=0 < tau
        assert pairwise_dedup(np.stack([a, b, c]), tau) == [0, 2]


class TestBuckets:
    def test_hd_is_16_9(self):
        assert assign_bucket(1920, 1080, 5.0).aspect_id == "16:9"

    def test_square(self):
        assert assign_bucket(1000, 1000, 5.0).aspect_id == "1:1"

    def test_portrait(self):
        assert assign_bucket(1080, 1920, 5.0).aspect_id == "9:16"

    def test_duration_floor_and_truncate(self):
        bucket = assign_bucket(640, 480, 5.7)
        assert bucket.duration_s == 5
        assert float(bucket.duration_s) == 5.0

    def test_scale_invariance(self):
        for w, h in [(16, 9), (3, 2), (4, 3), (7, 5)]:
            a = assign_bucket(w, h, 3.0).aspect_id
            for s in (2, 10, 77):
                assert assign_bucket(w * s, h * s, 3.0).aspect_id == a

    def test_exactly_seven_aspects(self):
        assert len(ASPECT_BUCKETS) == 7

    def test_max_batch_positive(self):
        for d in (0.0, 1.0, 8.0, 30.0):
            assert assign_bucket(64, 64, d).max_batch >= 1


def _records_with_scores(scores):
    return [ClipRecord(source_id="s", clip_id=f"c{i:04d}", start=0, end=8,
                       fps=8.0, width=16, height=16,
                       aesthetic=a, motion_post=m)
            for i, (a, m) in enumerate(scores)]


class TestTopPercentile:
    def test_correlated_scores_exact_count(self):
        records = _records_with_scores([(i, i) for i in range(100)])
        assert len(select_top_percentile(records, 0.1)) == 10

    def test_p_one_selects_all(self):
        records = _records_with_scores([(i, -i) for i in range(10)])
        assert len(select_top_percentile(records, 1.0)) == 10

    def test_independent_scores_fraction_approx_p_squared(self):
        rng = Rng(11)
        n = 10_000
        scores = list(zip(rng.stream("a").uniform((n,)), rng.stream("m").uniform((n,))))
        picked = select_top_percentile(_records_with_scores(scores), 0.1)
        frac = len(picked) / n
        sigma = np.sqrt(0.01 * 0.99 / n)
        assert abs(frac - 0.01) < 4 * sigma

    def test_selection_is_order_stable_subset(self):
        records = _records_with_scores([(i % 7, (i * 3) % 11) for i in range(50)])
        picked = select_top_percentile(records, 0.2)
        ids = [r.clip_id for r in picked]
        all_ids = [r.clip_id for r in records]
        assert ids == [i for i in all_ids if i in set(ids)]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    build_curation_corpus(d, seed=0)
    return d


class TestPipeline:

    def test_end_to_end(self, corpus, tmp_path):
        records = run_curation(corpus, CurationConfig())
        by_source = {}
        for r in records:
            by_source.setdefault(r.source_id, []).append(r)
        # alpha: pan + square kept, static dropped for motion
        reasons = {r.clip_id: r.drop_reason for r in by_source["alpha"]}
        assert len(by_source["alpha"]) == 3
        assert sum(r.kept for r in by_source["alpha"]) == 2
        assert "low-motion" in reasons.values()
        # gamma blurred: dropped by blur
        assert all(r.drop_reason == "blur" for r in by_source["gamma"])
        # delta: duplicate clip dropped by pairwise dedup
        delta = by_source["delta"]
        assert [r.kept for r in delta] == [True, False]
        assert delta[1].drop_reason == "dup-pairwise"
        # every kept record has a bucket
        for r in records:
            if r.kept:
                assert r.bucket_aspect and r.bucket_duration >= 0

    def test_manifest_roundtrip(self, corpus, tmp_path):
        records = run_curation(corpus, CurationConfig())
        path = tmp_path / "manifest.csv"
        write_manifest(records, path)
        rows = read_manifest(path)
        assert len(rows) == len(records)
        assert rows[0]["clip_id"] == records[0].clip_id
        assert {row["kept"] for row in rows} <= {"0", "1"}

    def test_determinism(self, corpus):
        a = run_curation(corpus, CurationConfig())
        b = run_curation(corpus, CurationConfig())
        for ra, rb in zip(a, b):
            assert ra.clip_id == rb.clip_id
            assert ra.kept == rb.kept
            assert ra.blur == rb.blur
            assert np.array_equal(ra.feature, rb.feature)


class TestEmbedderAndAesthetic:
    def test_duplicates_have_cos_one(self):
        emb = ClipEmbedder(seed=0)
        v = panning_video(Rng(12), 10, 24, 24)
        a = emb.embed(v)
        b = emb.embed(v.copy())
        assert abs(float(a @ b) - 1.0) < 1e-12

    def test_distinct_textures_decorrelated(self):
        emb = ClipEmbedder(seed=0)
        a = emb.embed(panning_video(Rng(13, ("x",)), 10, 24, 24))
        b = emb.embed(panning_video(Rng(14, ("y",)), 10, 24, 24))
        assert float(a @ b) < 0.9

    def test_aesthetic_prefers_sharp_contrast(self):
        scorer = StubAestheticScorer()
        sharp = np.repeat(checkerboard(16, 16)[None], 4, axis=0)
        blurred = np.stack([gaussian_blur_frame(f, 2.0) for f in sharp])
        assert scorer.score(sharp) > scorer.score(blurred)
