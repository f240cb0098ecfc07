import logging

import numpy as np
import pytest

from gen_encoder.data import (CATEGORY_NAMES, ClickRecord, CoClickGroup, DataFormatError, LabeledPair,
                              ParaphraseExample, SimilarityJudgment, build_coclick_groups, generate_clicks,
                              generate_corpus, generate_judgments, generate_paraphrases, generate_query_log,
                              generate_sessions, generate_synthetic_world, group_judgments,
                              judgments_to_classification, load_clicks, load_counts, load_groups, load_judgments,
                              load_labeled_pairs, load_paraphrase_pairs, load_queries, split_records, write_clicks,
                              write_counts, write_groups, write_judgments, write_labeled_pairs,
                              write_paraphrase_pairs, write_queries)


def click(q, url, t=0, user="u"):
    return ClickRecord(q, url, t, "s", user)


def test_two_queries_on_one_url_form_a_group():
    groups = build_coclick_groups([click("shoes", "U1"), click("sneakers", "U1")])
    assert groups == [CoClickGroup("U1", ("shoes", "sneakers"))]


def test_url_with_six_queries_is_dropped():
    assert build_coclick_groups([click(f"q{i}", "U1") for i in range(6)]) == []


def test_url_with_one_query_is_dropped_and_duplicates_count_once():
    assert build_coclick_groups([click("a", "U1"), click("a", "U1"), click(" A ", "U1")]) == []


def test_unclicked_records_are_ignored():
    assert build_coclick_groups([click("a", ""), click("b", "")]) == []


def test_grouping_ignores_record_order():
    world = generate_synthetic_world(K=6, seed=2)
    clicks = generate_clicks(world, seed=2)
    shuffled = [clicks[i] for i in np.random.default_rng(0).permutation(len(clicks))]
    assert build_coclick_groups(clicks) == build_coclick_groups(shuffled)


def test_world_needs_two_intents():
    with pytest.raises(ValueError, match="K=1"):
        generate_synthetic_world(K=1)


def test_smallest_world():
    world = generate_synthetic_world(K=2, queries_per_intent=3, seed=0)
    assert world.n_intents == 2
    assert all(len(world.train_variants[i]) == 3 for i in range(2))


def test_same_seed_same_corpus():
    a = generate_corpus(K=8, seed=5, n_query_paraphrases=50, n_question_paraphrases=20)
    b = generate_corpus(K=8, seed=5, n_query_paraphrases=50, n_question_paraphrases=20)
    assert a.clicks == b.clicks and a.judgments == b.judgments and a.paraphrases == b.paraphrases


def test_groups_are_intent_pure_without_noise():
    world = generate_synthetic_world(K=10, seed=3, noise_rate=0.0)
    for g in build_coclick_groups(generate_clicks(world, seed=3)):
        assert len({world.intent_of(q) for q in g.queries}) == 1


def test_judgment_grades_agree_with_intents():
    world = generate_synthetic_world(K=10, seed=4)
    for j in generate_judgments(world, seed=4):
        same = world.intent_of(j.target) == world.intent_of(j.candidate)
        assert same == (j.grade != "Bad")


def test_paraphrase_labels_agree_with_intents():
    world = generate_synthetic_world(K=10, seed=4)
    for task in ("query", "question"):
        for p in generate_paraphrases(world, 200, task, seed=4):
            if p.label == 1:
                assert world.intent_of(p.text_a) == world.intent_of(p.text_b)


def test_classification_view_drops_fair():
    js = [SimilarityJudgment("t", "a", "Good"), SimilarityJudgment("t", "b", "Fair"),
          SimilarityJudgment("t", "c", "Bad")]
    assert judgments_to_classification(js) == [("t", "a", 1), ("t", "c", 0)]
    assert group_judgments(js) == {"t": [("a", "Good"), ("b", "Fair"), ("c", "Bad")]}


def test_split_records_partitions():
    parts = split_records(list(range(100)), [0.7, 0.1, 0.2], seed=1)
    assert [len(p) for p in parts] == [70, 10, 20]
    assert sorted(sum(parts, [])) == list(range(100))


def test_sessions_have_clicks_and_labels():
    world = generate_synthetic_world(K=20, seed=1)
    records, labeled = generate_sessions(world, n_users=5, sessions_per_user=2, seed=1)
    assert {p.category for p in labeled} <= set(CATEGORY_NAMES)
    by_session = {}
    for r in records:
        by_session.setdefault(r.session_id, []).append(r)
    assert all(any(r.clicked for r in rs) for rs in by_session.values())


def test_query_log_sample_is_distinct():
    world = generate_synthetic_world(K=10, seed=0)
    qlog = generate_query_log(world, past_events=5000, sample_events=2000, sample_size=200, seed=0)
    assert len(set(qlog.sample)) == len(qlog.sample) <= 200
    assert all(c > 0 for c in qlog.frequency.values())


# --- loaders ---------------------------------------------------------------------------


def test_paraphrase_line_parses(tmp_path):
    f = tmp_path / "p.tsv"
    f.write_text("q1\tq2\t+1\tquery\n")
    assert load_paraphrase_pairs(f) == [ParaphraseExample("q1", "q2", 1, "query")]


def test_bad_label_aborts_small_file_with_line_number(tmp_path):
    f = tmp_path / "p.tsv"
    f.write_text("q1\tq2\t+1\tquery\nq1\tq2\t2\tquery\n")
    with pytest.raises(DataFormatError, match="line 2"):
        load_paraphrase_pairs(f)


def test_single_bad_line_in_large_file_is_skipped(tmp_path, caplog):
    f = tmp_path / "p.tsv"
    good = "".join(f"a{i}\tb{i}\t-1\tquestion\n" for i in range(200))
    f.write_text(good + "x\ty\tmaybe\tquery\n")
    with caplog.at_level(logging.WARNING):
        rows = load_paraphrase_pairs(f)
    assert len(rows) == 200 and "line 201" in caplog.text


def test_bad_line_fraction_above_one_percent_aborts(tmp_path):
    f = tmp_path / "j.tsv"
    good = "".join(f"t\tc{i}\tGood\n" for i in range(98))
    f.write_text(good + "t\tx\tGreat\nt\ty\tOK\n")
    with pytest.raises(DataFormatError) as exc:
        load_judgments(f)
    assert len(exc.value.errors) == 2


def test_empty_file_warns(tmp_path, caplog):
    f = tmp_path / "c.tsv"
    f.write_text("")
    with caplog.at_level(logging.WARNING):
        assert load_clicks(f) == []
    assert "empty" in caplog.text


def test_round_trips(tmp_path):
    corpus = generate_corpus(K=4, seed=0, n_query_paraphrases=20, n_question_paraphrases=10)
    write_clicks(tmp_path / "c", corpus.clicks, seed=0)
    assert load_clicks(tmp_path / "c") == corpus.clicks
    write_judgments(tmp_path / "j", corpus.judgments)
    assert load_judgments(tmp_path / "j") == corpus.judgments
    write_paraphrase_pairs(tmp_path / "p", corpus.paraphrases["train"], seed=0)
    assert load_paraphrase_pairs(tmp_path / "p") == corpus.paraphrases["train"]
    groups = build_coclick_groups(corpus.clicks)
    write_groups(tmp_path / "g", groups)
    assert load_groups(tmp_path / "g") == groups
    pairs = [LabeledPair("a b", "c", 3), LabeledPair("c", "d", 0)]
    write_labeled_pairs(tmp_path / "l", pairs)
    assert load_labeled_pairs(tmp_path / "l") == pairs
    write_counts(tmp_path / "n", {"b": 2, "a": 7})
    assert load_counts(tmp_path / "n") == {"a": 7, "b": 2}
    write_queries(tmp_path / "q", ["x y", "z"])
    assert load_queries(tmp_path / "q") == ["x y", "z"]
