import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rotcal import correspondence as corr
from rotcal import fileio


def random_homography(rng, scale=1.0):
    h = np.eye(3) + scale * rng.normal(scale=0.1, size=(3, 3))
    h[2, :2] = rng.normal(scale=1e-4, size=2)
    return h / h[2, 2]


def apply_h(h, pts):
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ h.T
    return ph[:, :2] / ph[:, 2:3]


def make_match_set(pts_a, pts_b):
    n = len(pts_a)
    return corr.MatchSet("a", "b", np.stack([np.arange(n)] * 2, axis=1), np.asarray(pts_a, float), np.asarray(pts_b, float))


def h_relative_diff(h1, h2):
    a = h1 / np.linalg.norm(h1)
    b = h2 / np.linalg.norm(h2)
    return min(np.abs(a - b).max(), np.abs(a + b).max())


class TestVerifyHomography:
    def test_exact_pairs_all_inliers(self):
        rng = np.random.default_rng(0)
        h_true = random_homography(rng)
        pts_a = rng.uniform(100, 900, size=(100, 2))
        pts_b = apply_h(h_true, pts_a)
        got = corr.verify_homography(make_match_set(pts_a, pts_b), threshold_px=4.0, seed=1)
        assert got is not None
        h, inl = got
        assert len(inl) == 100
        assert h_relative_diff(h, h_true) < 1e-6

    def test_planted_outliers(self):
        rng = np.random.default_rng(1)
        h_true = random_homography(rng)
        clean = rng.uniform(100, 900, size=(60, 2))
        clean_b = apply_h(h_true, clean)
        junk_a = rng.uniform(100, 900, size=(40, 2))
        junk_b = rng.uniform(100, 900, size=(40, 2))
        pts_a = np.concatenate([clean, junk_a])
        pts_b = np.concatenate([clean_b, junk_b])
        got = corr.verify_homography(make_match_set(pts_a, pts_b), threshold_px=4.0, seed=2)
        assert got is not None
        _, inl = got
        assert len(inl) >= 60
        planted = set(range(60))
        assert planted.issubset(set(inl.pairs[:, 0].tolist()))

    def test_below_minimum_discarded(self):
        rng = np.random.default_rng(2)
        h_true = random_homography(rng)
        pts_a = rng.uniform(100, 900, size=(30, 2))
        pts_b = apply_h(h_true, pts_a)
        assert corr.verify_homography(make_match_set(pts_a, pts_b), threshold_px=4.0, seed=3) is None

    def test_retained_pairs_within_threshold(self):
        rng = np.random.default_rng(3)
        h_true = random_homography(rng)
        pts_a = rng.uniform(100, 900, size=(120, 2))
        pts_b = apply_h(h_true, pts_a) + rng.normal(scale=2.0, size=(120, 2))
        got = corr.verify_homography(make_match_set(pts_a, pts_b), threshold_px=4.0, seed=4)
        assert got is not None
        h, inl = got
        err = corr.symmetric_transfer_error(h, inl.pts_a, inl.pts_b)
        assert np.all(err <= 4.0 + 1e-9)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(4)
        h_true = random_homography(rng)
        pts_a = rng.uniform(100, 900, size=(80, 2))
        pts_b = apply_h(h_true, pts_a) + rng.normal(scale=1.5, size=(80, 2))
        m = make_match_set(pts_a, pts_b)
        h1, in1 = corr.verify_homography(m, seed=7)
        h2, in2 = corr.verify_homography(m, seed=7)
        assert np.array_equal(in1.pairs, in2.pairs)
        assert np.array_equal(h1, h2)

    def test_collinear_minimal_sample_rejected(self):
        pts = np.stack([np.arange(4.0), np.arange(4.0)], axis=1)
        assert corr.fit_homography(pts, pts) is None


class TestTracks:
    def graph_from_edges(self, edges, nviews=3):
        g = corr.MatchGraph()
        for i in range(nviews):
            vid = chr(ord("A") + i)
            g.add_view(vid, 1000, 1000)
            g.keypoints[vid] = np.arange(20, dtype=float).reshape(10, 2)
        for a, ia, b, ib in edges:
            g.match_sets.append(
                corr.MatchSet(a, b, np.array([[ia, ib]]), g.keypoints[a][[ia]], g.keypoints[b][[ib]])
            )
        return g

    def test_transitive_merge(self):
        g = self.graph_from_edges([("A", 1, "B", 3), ("B", 3, "C", 7)])
        tracks = corr.build_tracks(g)
        assert len(tracks) == 1
        assert set(tracks[0].observations) == {"A", "B", "C"}
        assert not tracks[0].conflicted

    def test_conflict_marked(self):
        g = self.graph_from_edges([("A", 1, "B", 3), ("A", 2, "B", 3)])
        tracks = corr.build_tracks(g)
        assert len(tracks) == 1
        assert tracks[0].conflicted

    def test_matches_brute_force_closure(self):
        rng = np.random.default_rng(5)
        for trial in range(50):
            nviews = rng.integers(3, 7)
            vids = [chr(ord("A") + i) for i in range(nviews)]
            g = corr.MatchGraph()
            per_view = 12
            for vid in vids:
                g.add_view(vid, 1000, 1000)
                g.keypoints[vid] = rng.uniform(0, 1000, size=(per_view, 2))
            edges = []
            for _ in range(rng.integers(5, 40)):
                a, b = rng.choice(nviews, size=2, replace=False)
                edges.append((vids[a], int(rng.integers(per_view)), vids[b], int(rng.integers(per_view))))
            for a, ia, b, ib in edges:
                g.match_sets.append(
                    corr.MatchSet(a, b, np.array([[ia, ib]]), g.keypoints[a][[ia]], g.keypoints[b][[ib]])
                )
            tracks = corr.build_tracks(g)

            # independent oracle: breadth-first transitive closure
            adj = {}
            for a, ia, b, ib in edges:
                adj.setdefault((a, ia), set()).add((b, ib))
                adj.setdefault((b, ib), set()).add((a, ia))
            seen = set()
            components = []
            for node in sorted(adj):
                if node in seen:
                    continue
                comp, stack = set(), [node]
                while stack:
                    cur = stack.pop()
                    if cur in comp:
                        continue
                    comp.add(cur)
                    stack.extend(adj[cur] - comp)
                seen |= comp
                components.append(frozenset(comp))
            assert {frozenset(t.members) for t in tracks} == set(components)

    def test_partition_property(self):
        rng = np.random.default_rng(6)
        g = corr.MatchGraph()
        for vid in "ABCD":
            g.add_view(vid, 500, 500)
            g.keypoints[vid] = rng.uniform(0, 500, size=(15, 2))
        for _ in range(30):
            a, b = rng.choice(4, size=2, replace=False)
            g.match_sets.append(corr.MatchSet(
                "ABCD"[a], "ABCD"[b],
                np.array([[rng.integers(15), rng.integers(15)]]),
                np.zeros((1, 2)), np.zeros((1, 2))))
        tracks = corr.build_tracks(g)
        all_members = [m for t in tracks for m in t.members]
        assert len(all_members) == len(set(all_members))  # disjoint
        matched = {(m.view_a, int(ia)) for m in g.match_sets for ia, _ in m.pairs}
        matched |= {(m.view_b, int(ib)) for m in g.match_sets for _, ib in m.pairs}
        assert set(all_members) == matched  # exhaustive

    @settings(max_examples=30, deadline=None)
    @given(st.randoms(use_true_random=False))
    def test_order_independent(self, pyrandom):
        rng = np.random.default_rng(7)
        g = self.graph_from_edges(
            [("A", 1, "B", 3), ("B", 3, "C", 7), ("A", 5, "C", 2), ("B", 0, "C", 0)]
        )
        base = {frozenset(t.members) for t in corr.build_tracks(g)}
        shuffled = list(g.match_sets)
        pyrandom.shuffle(shuffled)
        g.match_sets = shuffled
        assert {frozenset(t.members) for t in corr.build_tracks(g)} == base

    def test_filter_short_and_conflicted(self):
        g = self.graph_from_edges([("A", 1, "B", 3), ("A", 2, "B", 3), ("A", 4, "C", 7)])
        tracks = corr.build_tracks(g)
        kept = corr.filter_tracks(tracks, min_track_len=2)
        assert len(kept) == 1
        assert not kept[0].conflicted
        # length-1 "track" cannot arise from matches, so test the api directly
        t = corr.Track(track_id=99, observations={"A": np.zeros(2)}, members=[("A", 0)])
        assert corr.filter_tracks([t], min_track_len=2) == []

    def test_filter_idempotent(self):
        g = self.graph_from_edges([("A", 1, "B", 3), ("B", 3, "C", 7), ("A", 2, "C", 1)])
        once = corr.filter_tracks(corr.build_tracks(g), 2)
        twice = corr.filter_tracks(once, 2)
        assert [t.track_id for t in once] == [t.track_id for t in twice]

    def test_length3_track_retained(self):
        g = self.graph_from_edges([("A", 1, "B", 3), ("B", 3, "C", 7)])
        kept = corr.filter_tracks(corr.build_tracks(g), 2)
        assert len(kept) == 1 and len(kept[0]) == 3


class TestLoadMatches:
    def write(self, tmp_path, payload):
        p = tmp_path / "m.json"
        p.write_text(json.dumps(payload))
        return p

    def base(self):
        return {
            "format": "matches",
            "views": [
                {"id": "a", "width": 1920, "height": 1080},
                {"id": "b", "width": 1920, "height": 1080},
            ],
            "matches": [],
        }

    def test_empty_graph(self, tmp_path):
        g = corr.load_matches(self.write(tmp_path, self.base()))
        assert set(g.views) == {"a", "b"}
        assert g.match_sets == []
        assert g.edge_weights() == {}

    def test_single_edge_weight(self, tmp_path):
        rng = np.random.default_rng(8)
        payload = self.base()
        pairs = np.concatenate([rng.uniform(0, 1000, (50, 2)), rng.uniform(0, 1000, (50, 2))], axis=1)
        payload["matches"] = [{"view_a": "a", "view_b": "b", "pairs": pairs.tolist()}]
        g = corr.load_matches(self.write(tmp_path, payload))
        assert g.edge_weights() == {("a", "b"): 50}

    def test_nan_coordinate_rejected_with_context(self, tmp_path):
        payload = self.base()
        payload["matches"] = [{"view_a": "a", "view_b": "b", "pairs": [[1.0, 2.0, float("nan"), 4.0]]}]
        p = tmp_path / "m.json"
        p.write_text(json.dumps(payload).replace("NaN", "NaN"))
        with pytest.raises(fileio.ParseError, match=r"pairs\[0\]"):
            corr.load_matches(p)

    def test_unknown_view_rejected(self, tmp_path):
        payload = self.base()
        payload["matches"] = [{"view_a": "a", "view_b": "zz", "pairs": []}]
        with pytest.raises(fileio.ParseError, match="unknown view"):
            corr.load_matches(self.write(tmp_path, payload))

    def test_keypoints_deduplicated(self, tmp_path):
        payload = self.base()
        payload["matches"] = [
            {"view_a": "a", "view_b": "b", "pairs": [[5.0, 5.0, 7.0, 7.0], [5.0, 5.0, 7.0, 7.0]]}
        ]
        g = corr.load_matches(self.write(tmp_path, payload))
        assert len(g.keypoints["a"]) == 1
        assert len(g.match_sets[0]) == 1

    def test_unknown_fields_ignored(self, tmp_path):
        payload = self.base()
        payload["exporter"] = {"name": "whatever", "version": 3}
        payload["views"][0]["score"] = 0.5
        g = corr.load_matches(self.write(tmp_path, payload))
        assert set(g.views) == {"a", "b"}
