"""Context requests, spatial vectors, the stub provider, and feature wiring."""

from __future__ import annotations

import numpy as np
import pytest

from formgraph.constants import HIDDEN_DIM, VISUAL_FEATURE_DIM
from formgraph.docmodel import Document, FUNSD_CLASSES, TextLine
from formgraph.errors import UsageError
from formgraph.features import (
    ProviderRequest,
    apply_transition,
    call_provider,
    edge_context,
    edge_spatial,
    init_graph_features,
    node_context,
    node_spatial,
    reintroduce_features,
    resolve_provider,
    stub_provider,
)
from formgraph.geometry import BBox
from formgraph.gnn import LinearHead
from formgraph.graphedit import EdgeScores, contract, init_graph


def _line(i, box, conf=1.0, label="other"):
    return TextLine(id=i, bbox=box, confidence=conf,
                    class_scores=FUNSD_CLASSES.one_hot(label))


class TestProviderRequest:
    def test_rejects_degenerate_window(self):
        with pytest.raises(UsageError):
            ProviderRequest(window=BBox(0, 0, 0, 5), grid=(10, 10),
                            mask_channels=((), ()))

    def test_rejects_wrong_channel_count(self):
        with pytest.raises(UsageError):
            ProviderRequest(window=BBox(0, 0, 5, 5), grid=(10, 10),
                            mask_channels=((),))


class TestContextRequests:
    def test_node_window_pads_and_clamps(self):
        own = [BBox(30, 40, 60, 50)]
        req = node_context(own, own, 1000, 800)
        assert req.window == BBox(10, 20, 80, 70)
        assert req.grid == (10, 10)

        near_corner = [BBox(5, 3, 30, 20)]
        req = node_context(near_corner, near_corner, 1000, 800)
        assert req.window == BBox(0, 0, 50, 40)

    def test_node_channels(self):
        own = [BBox(0, 0, 10, 10)]
        other = BBox(50, 0, 60, 10)
        req = node_context(own, [other] + own, 100, 100)
        assert len(req.mask_channels) == 2
        assert req.mask_channels[0] == (own[0], other)  # sorted
        assert req.mask_channels[1] == (own[0],)

    def test_edge_window_covers_both_sides(self):
        a = [BBox(30, 30, 40, 40)]
        b = [BBox(70, 60, 90, 80)]
        req = edge_context(a, b, a + b, 1000, 800)
        assert req.window == BBox(10, 10, 110, 100)
        assert req.grid == (16, 16)
        assert len(req.mask_channels) == 3
        assert req.mask_channels[1] == tuple(a)
        assert req.mask_channels[2] == tuple(b)


class TestSpatial:
    def test_node_vector(self):
        ln = _line(0, BBox(0, 0, 50, 20), conf=0.8, label="question")
        vec = node_spatial([ln], [ln.bbox], image_width=100, image_height=200)
        np.testing.assert_allclose(vec, [0.8, 0.1, 0.5, 0.0, 1.0, 0.0, 0.0], atol=1e-15)

    def test_node_vector_averages_members(self):
        a = _line(0, BBox(0, 0, 50, 20), conf=1.0, label="question")
        b = _line(1, BBox(0, 30, 50, 50), conf=0.5, label="answer")
        vec = node_spatial([a, b], [a.bbox, b.bbox], 100, 100)
        assert vec[0] == 0.75
        # the covering box spans both lines
        assert vec[1] == 0.5 and vec[2] == 0.5
        np.testing.assert_allclose(vec[3:], [0.0, 0.5, 0.5, 0.0], atol=1e-15)

    def test_edge_vector(self):
        a = _line(0, BBox(0, 0, 20, 10), label="question")
        b = _line(1, BBox(40, 0, 100, 30), label="answer")
        vec = edge_spatial([a], [a.bbox], [b], [b.bbox], image_width=100, image_height=100)
        assert vec.shape == (16,)
        np.testing.assert_allclose(vec[:4], [0.1, 0.3, 0.2, 0.6], atol=1e-15)
        np.testing.assert_allclose(vec[4:8], [0.0, 1.0, 0.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(vec[8:12], [0.0, 0.0, 1.0, 0.0], atol=1e-15)
        want = [np.hypot((ax - bx) / 100, (ay - by) / 100)
                for (ax, ay), (bx, by) in zip(a.bbox.corners(), b.bbox.corners())]
        np.testing.assert_allclose(vec[12:], want, atol=1e-15)

    def test_empty_members_rejected(self):
        with pytest.raises(UsageError):
            node_spatial([], [BBox(0, 0, 1, 1)], 10, 10)


class TestStubProvider:
    def _request(self, shift=0.0, grid=(10, 10)):
        own = [BBox(30 + shift, 40, 60 + shift, 50)]
        return ProviderRequest(window=BBox(10, 20, 80, 70), grid=grid,
                               mask_channels=(tuple(own), tuple(own)))

    def test_deterministic_and_unit_scale(self):
        a = stub_provider(self._request())
        b = stub_provider(self._request())
        assert a.shape == (VISUAL_FEATURE_DIM,)
        np.testing.assert_array_equal(a, b)
        assert 0.5 < a.std() < 1.5

    def test_sub_lattice_shift_is_invisible(self):
        base = stub_provider(self._request())
        nudged = stub_provider(self._request(shift=0.004))
        np.testing.assert_array_equal(base, nudged)

    def test_visible_shift_changes_output(self):
        base = stub_provider(self._request())
        moved = stub_provider(self._request(shift=0.06))
        assert not np.array_equal(base, moved)

    def test_channel_box_order_is_irrelevant(self):
        b1, b2 = BBox(0, 0, 10, 10), BBox(20, 0, 30, 10)
        fwd = ProviderRequest(BBox(0, 0, 50, 30), (10, 10), ((b1, b2), (b1,)))
        rev = ProviderRequest(BBox(0, 0, 50, 30), (10, 10), ((b2, b1), (b1,)))
        np.testing.assert_array_equal(stub_provider(fwd), stub_provider(rev))

    def test_grid_feeds_the_key(self):
        assert not np.array_equal(
            stub_provider(self._request(grid=(10, 10))),
            stub_provider(self._request(grid=(16, 16))),
        )


class TestResolveProvider:
    def test_stub(self):
        assert resolve_provider("stub") is stub_provider

    def test_module_attribute(self):
        provider = resolve_provider("formgraph.features:stub_provider")
        assert provider is stub_provider

    def test_bad_specs(self):
        with pytest.raises(UsageError):
            resolve_provider("not-a-provider")
        with pytest.raises(UsageError):
            resolve_provider("formgraph.features:does_not_exist")
        with pytest.raises(UsageError):
            resolve_provider("no.such.module:thing")
        with pytest.raises(UsageError):
            resolve_provider("formgraph.constants:VISUAL_FEATURE_DIM")


class TestCallProvider:
    def test_validates_shape(self):
        with pytest.raises(UsageError):
            call_provider(lambda req: np.zeros(7), self._req())

    def test_validates_finiteness(self):
        bad = np.zeros(VISUAL_FEATURE_DIM)
        bad[3] = np.nan
        with pytest.raises(UsageError):
            call_provider(lambda req: bad, self._req())

    def test_coerces_lists(self):
        out = call_provider(lambda req: [0.5] * VISUAL_FEATURE_DIM, self._req())
        assert out.dtype == np.float64

    def _req(self):
        return ProviderRequest(BBox(0, 0, 10, 10), (10, 10), ((), ()))


class TestTransitions:
    def test_value(self, rng):
        w = rng.standard_normal((3, 5))
        b = rng.standard_normal(3)
        x = rng.standard_normal(5)
        np.testing.assert_allclose(apply_transition(w, b, x), w @ x + b, atol=1e-15)

    def test_width_check(self):
        with pytest.raises(UsageError):
            apply_transition(np.zeros((3, 5)), np.zeros(3), np.zeros(6))


class _FakeWeights:
    """Duck-typed weight source with tiny transitions for wiring tests."""

    def __init__(self, rng, out_dim=8, classes=4):
        node_in = VISUAL_FEATURE_DIM + 3 + classes
        edge_in = VISUAL_FEATURE_DIM + 8 + 2 * classes
        self._node = LinearHead(rng.standard_normal((out_dim, node_in)), rng.standard_normal(out_dim))
        self._edge = LinearHead(rng.standard_normal((out_dim, edge_in)), rng.standard_normal(out_dim))

    def init_node(self):
        return self._node

    def init_edge(self):
        return self._edge


class _FakeStage:
    def __init__(self, rng, feat_dim=8, classes=4):
        node_in = feat_dim + VISUAL_FEATURE_DIM + 3 + classes
        edge_in = feat_dim + VISUAL_FEATURE_DIM + 8 + 2 * classes
        self.reintro_node = LinearHead(rng.standard_normal((feat_dim, node_in)), rng.standard_normal(feat_dim))
        self.reintro_edge = LinearHead(rng.standard_normal((feat_dim, edge_in)), rng.standard_normal(feat_dim))


class _CountingProvider:
    def __init__(self):
        self.calls = 0

    def __call__(self, request):
        self.calls += 1
        return stub_provider(request)


def _wired_graph(rng):
    lines = [_line(i, BBox(0, 20.0 * i, 30, 20.0 * i + 10)) for i in range(4)]
    doc = Document(name="w", image_width=200, image_height=200,
                   class_set=FUNSD_CLASSES, lines=tuple(lines))
    graph = init_graph(lines, [(0, 1), (1, 2), (2, 3)])
    return doc, graph


class TestGraphWiring:
    def test_init_features_shapes_and_caching(self, rng):
        doc, graph = _wired_graph(rng)
        provider = _CountingProvider()
        weights = _FakeWeights(rng)
        wired = init_graph_features(graph, doc, provider, weights)
        assert provider.calls == 4 + 3
        for node in wired.nodes.values():
            assert node.feat.shape == (8,)
            assert node.initial.shape == (VISUAL_FEATURE_DIM + 7,)
        for edge in wired.edges.values():
            assert edge.feat.shape == (8,)
            assert edge.initial.shape == (VISUAL_FEATURE_DIM + 16,)

    def test_init_feature_value(self, rng):
        doc, graph = _wired_graph(rng)
        weights = _FakeWeights(rng)
        wired = init_graph_features(graph, doc, stub_provider, weights)
        node = wired.nodes[0]
        head = weights.init_node()
        np.testing.assert_allclose(node.feat, head.w @ node.initial + head.b, atol=1e-12)

    def test_reintroduction_recomputes_only_changed_geometry(self, rng):
        doc, graph = _wired_graph(rng)
        provider = _CountingProvider()
        weights = _FakeWeights(rng)
        wired = init_graph_features(graph, doc, provider, weights)
        baseline = provider.calls

        scores = {key: EdgeScores(0, 0, 0, 0) for key in wired.edges}
        node_scores = {nid: np.asarray(wired.nodes[nid].class_scores) for nid in wired.nodes}
        scored = wired.with_scores(node_scores, scores)
        shrunk = contract(scored, [(0, 1)], "merge", iteration=1)

        out = reintroduce_features(shrunk, doc, provider, _FakeStage(rng))
        # one fused node and one moved edge lost their cached initials
        assert provider.calls == baseline + 2
        for node in out.nodes.values():
            assert node.feat.shape == (8,)
            assert node.initial is not None

    def test_reintroduction_on_untouched_graph_reuses_everything(self, rng):
        doc, graph = _wired_graph(rng)
        provider = _CountingProvider()
        wired = init_graph_features(graph, doc, provider, _FakeWeights(rng))
        baseline = provider.calls
        out = reintroduce_features(wired, doc, provider, _FakeStage(rng))
        assert provider.calls == baseline
        node = out.nodes[2]
        base = wired.nodes[2]
        assert node.feat.shape == (8,)
        np.testing.assert_array_equal(node.initial, base.initial)

    def test_reintroduction_value(self, rng):
        doc, graph = _wired_graph(rng)
        wired = init_graph_features(graph, doc, stub_provider, _FakeWeights(rng))
        stage = _FakeStage(rng)
        out = reintroduce_features(wired, doc, stub_provider, stage)
        nid = 1
        stacked = np.concatenate([wired.nodes[nid].feat, wired.nodes[nid].initial])
        want = stage.reintro_node.w @ stacked + stage.reintro_node.b
        np.testing.assert_allclose(out.nodes[nid].feat, want, atol=1e-12)

    def test_reintroduction_requires_heads(self, rng):
        doc, graph = _wired_graph(rng)
        wired = init_graph_features(graph, doc, stub_provider, _FakeWeights(rng))

        class Bare:
            reintro_node = None
            reintro_edge = None

        with pytest.raises(UsageError):
            reintroduce_features(wired, doc, stub_provider, Bare())

    def test_reintroduction_requires_initialized_graph(self, rng):
        doc, graph = _wired_graph(rng)
        with pytest.raises(UsageError):
            reintroduce_features(graph, doc, stub_provider, _FakeStage(rng))

    def test_unknown_line_rejected(self, rng):
        doc, graph = _wired_graph(rng)
        ghost = _line(77, BBox(0, 150, 30, 160))
        bigger = init_graph(list(doc.lines) + [ghost], [])
        slim = Document(name="w", image_width=200, image_height=200,
                        class_set=FUNSD_CLASSES, lines=doc.lines)
        with pytest.raises(UsageError):
            init_graph_features(bigger, slim, stub_provider, _FakeWeights(rng))

    def test_full_width_matches_container(self, rng):
        from formgraph.weights import ModelWeights
        doc, graph = _wired_graph(rng)
        weights = ModelWeights.random(seed=1, class_count=4)
        wired = init_graph_features(graph, doc, stub_provider, weights)
        assert wired.nodes[0].feat.shape == (HIDDEN_DIM,)
        assert wired.edges[(0, 1)].feat.shape == (HIDDEN_DIM,)
        out = reintroduce_features(wired, doc, stub_provider, weights.stage(2))
        assert out.nodes[0].feat.shape == (HIDDEN_DIM,)
