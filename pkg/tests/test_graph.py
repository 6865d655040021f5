import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergcn.graph import (
    AuVocabulary,
    GcnStack,
    GraphError,
    ZeroOccurrenceWarning,
    build_adjacency,
    build_gcn_stack,
    build_vocabulary,
    format_adjacency,
    gcn_layer_forward,
    gcn_stack_forward,
    one_hot_nodes,
    parse_adjacency,
    reweight_adjacency,
)
from mergcn.tensor import Parameter, ShapeError, Tensor

from oracles import adjacency_by_pairs

EXAMPLE = [{1, 2}, {1}, {2, 4}]

annotation_lists = st.lists(
    st.sets(st.integers(1, 10), min_size=1, max_size=10), min_size=1, max_size=50
)


# --- vocabulary --------------------------------------------------------------


def test_vocabulary_union():
    v = build_vocabulary([{1, 2}, {4}])
    assert v.ids == (1, 2, 4) and v.n == 3


def test_vocabulary_single():
    assert build_vocabulary([{12}, {12}, {12}]).ids == (12,)


def test_vocabulary_order_insensitive():
    assert build_vocabulary([{4, 1}, {1, 4}]).ids == (1, 4)


def test_vocabulary_errors():
    with pytest.raises(GraphError):
        build_vocabulary([])
    with pytest.raises(GraphError):
        build_vocabulary([{1}, set()])
    with pytest.raises(GraphError):
        AuVocabulary((2, 1))


# --- adjacency ---------------------------------------------------------------


def test_adjacency_example_values():
    adj = build_adjacency(EXAMPLE, AuVocabulary((1, 2, 4)))
    expected = np.array(
        [
            [1.0, 0.5, 0.0],
            [0.5, 1.0, 1.0],
            [0.0, 0.5, 1.0],
        ]
    )
    np.testing.assert_array_equal(adj.a, expected)
    np.testing.assert_array_equal(adj.a, adjacency_by_pairs(EXAMPLE, (1, 2, 4)))
    np.testing.assert_array_equal(adj.counts, [2, 2, 1])


def test_adjacency_single_au():
    adj = build_adjacency([{1}], AuVocabulary((1,)))
    np.testing.assert_array_equal(adj.a, [[1.0]])


def test_adjacency_absent_au_gives_zero_column_and_warns():
    with pytest.warns(ZeroOccurrenceWarning, match=r"\[2\]"):
        adj = build_adjacency([{1}, {1}], AuVocabulary((1, 2)))
    np.testing.assert_array_equal(adj.a[:, 1], [0.0, 0.0])
    assert adj.a[0, 0] == 1.0
    assert adj.zero_columns() == [1]


def test_adjacency_unknown_au_names_id_and_index():
    with pytest.raises(GraphError, match=r"annotation 1 contains AU 9"):
        build_adjacency([{1}, {1, 9}], AuVocabulary((1,)))


def test_adjacency_is_not_symmetrized():
    adj = build_adjacency([{1, 2}, {1}], AuVocabulary((1, 2)))
    assert adj.a[0, 1] == 1.0  # P(AU1 | AU2) = 1/1
    assert adj.a[1, 0] == 0.5  # P(AU2 | AU1) = 1/2


def test_adjacency_is_immutable():
    adj = build_adjacency(EXAMPLE, AuVocabulary((1, 2, 4)))
    with pytest.raises(ValueError):
        adj.a[0, 0] = 3.0


@settings(max_examples=100, deadline=None)
@given(annotation_lists, st.sets(st.integers(1, 10), max_size=3))
def test_adjacency_invariants(annotations, extra):
    vocab = AuVocabulary(tuple(sorted(set().union(*annotations) | extra)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroOccurrenceWarning)
        adj = build_adjacency(annotations, vocab)
    np.testing.assert_array_equal(adj.a, adjacency_by_pairs(annotations, vocab.ids))
    assert np.all((adj.a >= 0) & (adj.a <= 1))
    for j in range(vocab.n):
        if adj.counts[j] > 0:
            assert adj.a[j, j] == 1.0
            np.testing.assert_allclose(adj.a[:, j] * adj.counts[j], adj.pair_counts[:, j], rtol=0, atol=1e-9)
        else:
            assert not adj.a[:, j].any()


def test_reweight_variants_are_opt_in():
    adj = build_adjacency(EXAMPLE, AuVocabulary((1, 2, 4)))
    np.testing.assert_array_equal(reweight_adjacency(adj), adj.a)
    binary = reweight_adjacency(adj, threshold=0.75)
    np.testing.assert_array_equal(binary, np.eye(3) + np.array([[0, 0, 0], [0, 0, 1], [0, 0, 0]]))
    rows = reweight_adjacency(adj, row_normalize=True)
    np.testing.assert_allclose(rows.sum(axis=1), 1.0)


# --- one-hot nodes and GCN layers --------------------------------------------


@pytest.mark.parametrize("n", [1, 3])
def test_one_hot_is_identity(n):
    x = one_hot_nodes(n).data
    np.testing.assert_array_equal(x, np.eye(n))
    np.testing.assert_array_equal(x.sum(axis=0), 1.0)
    np.testing.assert_array_equal(x.sum(axis=1), 1.0)


def test_layer_identity_propagation():
    h = np.abs(np.random.default_rng(0).standard_normal((3, 3)))
    out = gcn_layer_forward(Tensor(h), np.eye(3), Tensor(np.eye(3)), 0.2)
    np.testing.assert_array_equal(out.data, h)


def test_layer_hand_product():
    out = gcn_layer_forward(Tensor(np.eye(2)), np.array([[1.0, 1.0], [0.0, 1.0]]), Tensor([[2.0], [3.0]]), 0.2)
    np.testing.assert_array_equal(out.data, [[5.0], [3.0]])


def test_layer_leaky_branch():
    out = gcn_layer_forward(Tensor([[1.0]]), np.array([[1.0]]), Tensor([[-1.0]]), 0.2)
    np.testing.assert_allclose(out.data, [[-0.2]])


def test_layer_dimension_error():
    with pytest.raises(ShapeError, match="n=2"):
        gcn_layer_forward(Tensor(np.eye(3)), np.eye(2), Tensor(np.eye(3)), 0.2)


def test_stack_of_identities():
    stack = GcnStack([Parameter.from_array("w", np.eye(4))])
    np.testing.assert_array_equal(gcn_stack_forward(np.eye(4), stack).data, np.eye(4))


def test_default_stack_shape():
    stack = build_gcn_stack(5, np.random.default_rng(0))
    assert stack.depth == 2 and stack.dims == [5, 1024, 512]
    assert gcn_stack_forward(np.eye(5), stack).shape == (5, 512)


def test_scaled_stack_dims():
    assert build_gcn_stack(3, np.random.default_rng(0), width_scale=0.125).dims == [3, 128, 64]


def test_stack_rejects_wrong_node_count():
    stack = build_gcn_stack(3, np.random.default_rng(0), width_scale=0.01)
    with pytest.raises(ShapeError):
        gcn_stack_forward(np.eye(4), stack)


def test_diagonal_adjacency_isolates_nodes():
    rng = np.random.default_rng(4)
    stack = build_gcn_stack(4, rng, dims=(6, 3))
    base = gcn_stack_forward(np.eye(4), stack).data
    # Changing weights that only node 2 reads must not affect other rows.
    stack.layers[0].value.data[2] += 1.0
    changed = gcn_stack_forward(np.eye(4), stack).data
    np.testing.assert_array_equal(np.delete(base, 2, axis=0), np.delete(changed, 2, axis=0))
    assert not np.array_equal(base[2], changed[2])


@settings(max_examples=30, deadline=None)
@given(annotation_lists, st.randoms(use_true_random=False), st.integers(0, 2**31 - 1))
def test_permutation_equivariance(annotations, rnd, seed):
    vocab = build_vocabulary(annotations)
    n = vocab.n
    perm = list(range(n))
    rnd.shuffle(perm)
    relabel = {vocab.ids[k]: vocab.ids[perm[k]] for k in range(n)}
    permuted = [{relabel[a] for a in ann} for ann in annotations]
    adj = build_adjacency(annotations, vocab)
    adj_p = build_adjacency(permuted, vocab)
    P = np.zeros((n, n))
    P[np.arange(n), perm] = 1.0
    np.testing.assert_array_equal(adj_p.a, P.T @ adj.a @ P)

    stack = build_gcn_stack(n, np.random.default_rng(seed), dims=(7, 5))
    stack_p = GcnStack(
        [Parameter.from_array("w0", P.T @ stack.layers[0].value.data), stack.layers[1]], stack.slope
    )
    h = gcn_stack_forward(adj, stack).data
    h_p = gcn_stack_forward(adj_p, stack_p).data
    np.testing.assert_allclose(h_p, P.T @ h, rtol=0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(annotation_lists, st.integers(0, 2**31 - 1), st.floats(0.0, 0.99))
def test_layer_output_bound(annotations, seed, slope):
    vocab = build_vocabulary(annotations)
    adj = build_adjacency(annotations, vocab)
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((vocab.n, 4)) * 10
    w = rng.standard_normal((4, 3)) * 10
    out = gcn_layer_forward(Tensor(h), adj, Tensor(w), slope).data
    bound = np.abs(adj.a).sum(axis=1).max() * np.abs(h).max() * np.abs(w).sum(axis=0).max()
    assert np.all(np.isfinite(out))
    assert np.abs(out).max() <= bound * (1 + 1e-12)


# --- export ------------------------------------------------------------------


def test_export_golden_text():
    adj = build_adjacency(EXAMPLE, AuVocabulary((1, 2, 4)))
    assert format_adjacency(adj) == "n 3\nvocab 1 2 4\n1 0.5 0\n0.5 1 1\n0 0.5 1\n"


def test_export_round_trip():
    adj = build_adjacency([{1, 3}, {3, 5}, {1}], AuVocabulary((1, 3, 5)))
    vocab, a = parse_adjacency(format_adjacency(adj))
    assert vocab == adj.vocab
    np.testing.assert_array_equal(a, adj.a)


def test_parse_rejects_garbage():
    with pytest.raises(GraphError):
        parse_adjacency("n 2\nvocab 1 2\n1 0\n")
