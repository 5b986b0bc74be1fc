"""Knowledge hierarchy: parsing, rendering, structural metrics, violations."""

import random
from fractions import Fraction

import pytest

from kppo.hierarchy import (
    NOTE,
    TOPIC,
    KnowledgeTree,
    Node,
    PromptDocument,
    RenderDepthError,
    TreeBuilder,
    TreeError,
    balance_ratio,
    branching_factor,
    detect_violations,
    parse_prompt,
    render_prompt,
)

from conftest import oracle_violations, random_document, random_tree


def star_tree(children: int, kind: str = NOTE) -> KnowledgeTree:
    builder = TreeBuilder()
    hub = builder.add_topic(builder.root_id, "hub")
    for index in range(children):
        if kind == NOTE:
            builder.add_note(hub, f"spoke {index}")
        else:
            builder.add_topic(hub, f"spoke {index}")
    return builder.build()


# --- parsing -----------------------------------------------------------------


def test_parse_empty_text():
    doc = parse_prompt("")
    assert doc.preamble == ()
    assert doc.epilogue == ()
    assert doc.tree.is_empty()


def test_parse_hand_traced_outline():
    doc = parse_prompt("You are an expert.\n# Anatomy\n- The ulna is medial.\n")
    assert doc.preamble == ("You are an expert.",)
    root = doc.tree.nodes[doc.tree.root_id]
    assert len(root.children) == 1
    topic = doc.tree.nodes[root.children[0]]
    assert (topic.kind, topic.text, topic.depth) == (TOPIC, "Anatomy", 1)
    note = doc.tree.nodes[topic.children[0]]
    assert (note.kind, note.text, note.depth) == (NOTE, "The ulna is medial.", 2)
    assert doc.epilogue == ()


def test_parse_is_total_on_pathological_input():
    # seven hashes, hash without space, lone dash: all free text
    doc = parse_prompt("####### seven\n#nospace\n-\njust words\n")
    assert doc.tree.is_empty()
    assert doc.preamble == ("####### seven", "#nospace", "-", "just words")


def test_parse_level_skip_attaches_to_nearest_smaller_level():
    doc = parse_prompt("# A\n#### B\n### C\n")
    tree = doc.tree
    a = tree.nodes[tree.nodes[tree.root_id].children[0]]
    assert a.text == "A" and a.depth == 1
    b = tree.nodes[a.children[0]]
    c = tree.nodes[a.children[1]]
    # B has level 4, C level 3: C must not nest under B
    assert b.text == "B" and b.depth == 2
    assert c.text == "C" and c.depth == 2


def test_parse_bullet_before_heading_attaches_to_root():
    doc = parse_prompt("- floating note\n# Topic\n")
    root = doc.tree.nodes[doc.tree.root_id]
    first = doc.tree.nodes[root.children[0]]
    assert first.kind == NOTE and first.text == "floating note"


def test_parse_free_text_after_tree_is_epilogue():
    doc = parse_prompt("intro\n# T\n- n\nmiddle words\n# U\ntrailing\n")
    assert doc.preamble == ("intro",)
    assert doc.epilogue == ("middle words", "trailing")


def test_parse_empty_title_heading_degrades_to_free_text():
    doc = parse_prompt("#   \n")
    assert doc.tree.is_empty()
    assert doc.preamble == ("#   ",)


# --- rendering ---------------------------------------------------------------


def test_render_root_only_is_empty_string():
    assert render_prompt(PromptDocument()) == ""


def test_render_canonical_form():
    doc = parse_prompt("You are an expert.\n# Anatomy\n- The ulna is medial.\n")
    assert render_prompt(doc) == "You are an expert.\n\n# Anatomy\n- The ulna is medial.\n"


def test_render_blank_line_between_sibling_topics():
    builder = TreeBuilder()
    a = builder.add_topic(builder.root_id, "A")
    builder.add_note(a, "x")
    b = builder.add_topic(builder.root_id, "B")
    builder.add_topic(b, "C")
    text = render_prompt(PromptDocument(tree=builder.build()))
    assert text == "# A\n- x\n\n# B\n## C\n"


def test_render_depth_error_names_node():
    builder = TreeBuilder()
    parent = builder.root_id
    for level in range(7):
        parent = builder.add_topic(parent, f"level {level + 1}")
    with pytest.raises(RenderDepthError) as err:
        render_prompt(PromptDocument(tree=builder.build()))
    assert "level 7" in str(err.value)


def test_render_collapses_multiline_note_text():
    builder = TreeBuilder()
    topic = builder.add_topic(builder.root_id, "T")
    builder.add_note(topic, "line one\nline two")
    text = render_prompt(PromptDocument(tree=builder.build()))
    assert "- line one line two\n" in text


def test_round_trip_on_generated_documents():
    rng = random.Random(4242)
    for _ in range(300):
        doc = random_document(rng)
        again = parse_prompt(render_prompt(doc))
        assert again == doc


# --- tree invariants ---------------------------------------------------------


def test_note_node_cannot_have_children():
    with pytest.raises(TreeError):
        Node(id="x", kind=NOTE, text="t", depth=1, children=("y",))


def test_tree_rejects_orphans_and_double_reachability():
    root = Node(id="r", kind=TOPIC, text="", depth=0, children=("a",))
    a = Node(id="a", kind=TOPIC, text="a", depth=1)
    orphan = Node(id="o", kind=NOTE, text="o", depth=1)
    with pytest.raises(TreeError, match="unreachable"):
        KnowledgeTree(nodes={"r": root, "a": a, "o": orphan}, root_id="r")
    shared = Node(id="r", kind=TOPIC, text="", depth=0, children=("a", "a"))
    with pytest.raises(TreeError, match="twice"):
        KnowledgeTree(nodes={"r": shared, "a": a}, root_id="r")


def test_tree_rejects_bad_depth():
    root = Node(id="r", kind=TOPIC, text="", depth=0, children=("a",))
    deep = Node(id="a", kind=TOPIC, text="a", depth=5)
    with pytest.raises(TreeError, match="depth"):
        KnowledgeTree(nodes={"r": root, "a": deep}, root_id="r")


def test_every_node_reachable_exactly_once_on_random_trees():
    rng = random.Random(99)
    for _ in range(50):
        tree = random_tree(rng, max_nodes=60)
        visited = [n.id for n in tree.preorder()]
        assert len(visited) == len(set(visited)) == tree.size()


# --- structural metrics --------------------------------------------------------


def test_branching_factor_of_leaf_topic_is_zero():
    builder = TreeBuilder()
    leaf = builder.add_topic(builder.root_id, "leaf")
    tree = builder.build()
    assert branching_factor(tree, leaf) == 0
    assert balance_ratio(tree, leaf) == 0


def test_branching_factor_three_topics_with_notes():
    # root with 3 topic children, each with 2 note children: (3+2+2+2)/4
    builder = TreeBuilder()
    for t in range(3):
        topic = builder.add_topic(builder.root_id, f"t{t}")
        builder.add_note(topic, "n1")
        builder.add_note(topic, "n2")
    tree = builder.build()
    assert branching_factor(tree, tree.root_id) == Fraction(9, 4)
    assert balance_ratio(tree, tree.root_id) == Fraction(4, 3)


def test_branching_factor_chain():
    builder = TreeBuilder()
    t0 = builder.add_topic(builder.root_id, "t0")
    t1 = builder.add_topic(t0, "t1")
    builder.add_topic(t1, "t2")
    tree = builder.build()
    assert branching_factor(tree, t0) == Fraction(2, 3)


def test_balance_ratio_star():
    tree = star_tree(10, kind=TOPIC)
    hub = tree.nodes[tree.root_id].children[0]
    # bf over {hub + 10 leaves} = 10/11, so beta = 10 / (10/11) = 11
    assert branching_factor(tree, hub) == Fraction(10, 11)
    assert balance_ratio(tree, hub) == 11


def test_metrics_reject_note_nodes():
    builder = TreeBuilder()
    topic = builder.add_topic(builder.root_id, "t")
    note = builder.add_note(topic, "n")
    tree = builder.build()
    with pytest.raises(TreeError):
        branching_factor(tree, note)
    with pytest.raises(TreeError):
        balance_ratio(tree, note)


# --- violation detection --------------------------------------------------------


def test_detect_violations_empty_tree():
    report = detect_violations(TreeBuilder().build(), 16, 8.0)
    assert report.is_empty()


def test_detect_local_violation_star_17():
    tree = star_tree(17)
    hub = tree.nodes[tree.root_id].children[0]
    report = detect_violations(tree, 16, 8.0)
    assert [(v.node_id, v.outdeg, v.limit) for v in report.local_violations] == [
        (hub, 17, 16)
    ]
    assert report.global_violations == ()


def test_detect_global_violation_topic_star_10():
    tree = star_tree(10, kind=TOPIC)
    hub = tree.nodes[tree.root_id].children[0]
    report = detect_violations(tree, 16, 8.0)
    assert report.local_violations == ()
    assert [(v.node_id, v.beta) for v in report.global_violations] == [(hub, 11)]
    assert report.global_violations[0].bf == Fraction(10, 11)


def test_detect_violations_preorder_ordering():
    builder = TreeBuilder()
    first = builder.add_topic(builder.root_id, "first")
    second = builder.add_topic(builder.root_id, "second")
    for parent in (second, first):
        for index in range(3):
            builder.add_note(parent, f"n{index}")
    report = detect_violations(builder.build(), 2, 8.0)
    assert [v.node_id for v in report.local_violations] == [first, second]


def test_detect_violations_matches_brute_force():
    rng = random.Random(1812)
    for _ in range(250):
        tree = random_tree(rng, max_nodes=120)
        limit_c = rng.randint(1, 6)
        limit_f = rng.choice((0.8, 1.0, 1.5, 2.0, 4.0))
        report = detect_violations(tree, limit_c, limit_f)
        local, global_ = oracle_violations(tree, limit_c, limit_f)
        assert [(v.node_id, v.outdeg) for v in report.local_violations] == local
        assert [(v.node_id, v.beta, v.bf) for v in report.global_violations] == global_


def test_incremental_child_addition_matches_recomputation():
    from conftest import subtree_topic_stats

    builder = TreeBuilder()
    target = builder.add_topic(builder.root_id, "grows")
    for index in range(6):
        outdeg_before = builder.build().outdeg(target)
        builder.add_topic(target, f"child {index}")
        after = builder.build()
        assert after.outdeg(target) == outdeg_before + 1
        # recompute bf/beta from scratch and compare with the module values
        total, count = subtree_topic_stats(after, target)
        assert branching_factor(after, target) == Fraction(total, count)
        expected_beta = (
            Fraction(0)
            if total == 0
            else Fraction(after.outdeg(target)) / Fraction(total, count)
        )
        assert balance_ratio(after, target) == expected_beta


def test_violation_report_nodes_exist_and_unique():
    rng = random.Random(31)
    for _ in range(50):
        tree = random_tree(rng, max_nodes=80)
        report = detect_violations(tree, 2, 1.5)
        for violations in (report.local_violations, report.global_violations):
            ids = [v.node_id for v in violations]
            assert len(ids) == len(set(ids))
            for node_id in ids:
                assert tree.nodes[node_id].kind == TOPIC
