import json

import numpy as np
import pytest

from factlab import factgen
from factlab.errors import (
    AmbiguityError,
    ConfigurationError,
    RangeError,
    UnsupportedAttributeError,
)


def two_attr_schema():
    return factgen.schema_subset(factgen.default_schema("paper"), ["longitude", "operator"])


# ---------------------------------------------------------------- synth

def test_synth_cardinality():
    ds = factgen.synth_corpus(two_attr_schema(), num_keys=3, seed=7)
    assert len(ds) == 6
    for key in ds.keys():
        attrs = {t.attribute for t in ds.triples if t.key == key}
        assert attrs == {"longitude", "operator"}


def test_synth_correlation_total():
    schema = factgen.schema_subset(factgen.default_schema("compact"), ["type", "type_code"])
    ds = factgen.synth_corpus(schema, num_keys=100, seed=1)
    value_map = dict(schema[1].correlated_with[1])
    by_key = {}
    for t in ds.triples:
        by_key.setdefault(t.key, {})[t.attribute] = t.value
    for vals in by_key.values():
        assert value_map[vals["type"]] == vals["type_code"]


def test_synth_deterministic():
    a = factgen.synth_corpus(two_attr_schema(), num_keys=50, seed=3)
    b = factgen.synth_corpus(two_attr_schema(), num_keys=50, seed=3)
    assert a == b


def test_synth_empty_schema_rejected():
    with pytest.raises(ConfigurationError):
        factgen.synth_corpus([], num_keys=1, seed=0)


def test_synth_keys_unique():
    ds = factgen.synth_corpus(two_attr_schema(), num_keys=3000, seed=9)
    keys = ds.keys()
    assert len(keys) == len(set(keys)) == 3000


# ---------------------------------------------------------------- sampling

def test_sample_all_attributes_rule():
    corpus = factgen.synth_corpus(factgen.default_schema("compact")[:4], 1000, seed=5)
    sub = factgen.sample_facts(corpus, 10, seed=1)
    assert len(sub) == 40
    assert len(sub.keys()) == 10


def test_sample_identity_case():
    corpus = factgen.synth_corpus(two_attr_schema(), 30, seed=5)
    sub = factgen.sample_facts(corpus, 30, seed=1)
    assert sorted(t.identity for t in sub.triples) == sorted(t.identity for t in corpus.triples)


def test_sample_too_many_keys():
    corpus = factgen.synth_corpus(two_attr_schema(), 5, seed=5)
    with pytest.raises(RangeError):
        factgen.sample_facts(corpus, 6, seed=1)


def test_sample_uniformity_chi_square():
    # oracle: exact enumeration says each of the 20 keys is included with
    # p = 5/20 per draw; inclusion counts over trials are Binomial(trials, 1/4)
    corpus = factgen.synth_corpus(two_attr_schema(), 20, seed=5)
    keys = corpus.keys()
    trials = 2000
    counts = {k: 0 for k in keys}
    overlaps = []
    prev = None
    for s in range(trials):
        chosen = set(factgen.sample_facts(corpus, 5, seed=s).keys())
        for k in chosen:
            counts[k] += 1
        if prev is not None:
            overlaps.append(len(chosen & prev))
        prev = chosen
    expected = trials * 5 / 20
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    # chi-square with 19 dof: 1e-3 critical value is 43.8
    assert chi2 < 43.8, f"inclusion counts too skewed: chi2={chi2:.1f}"
    # hypergeometric expected overlap of two independent 5-of-20 samples: 25/20
    mean_overlap = np.mean(overlaps)
    assert abs(mean_overlap - 1.25) < 0.12


# ---------------------------------------------------------------- reverse

def _hand_corpus(values):
    schema = factgen.schema_subset(factgen.default_schema("paper"), ["credit_no"])
    triples = tuple(
        factgen.FactTriple(key=k, attribute="credit_no", value=v) for k, v in values
    )
    return factgen.FactDataset(triples=triples, schema=schema, seed=0)


def test_derive_reverse_renders_value_prompt():
    ds = _hand_corpus([("AcmeCo", "91110105MA77")])
    rev = factgen.derive_reverse(ds, "credit_no")
    assert len(rev) == 1
    t = rev.triples[0]
    assert t.direction == factgen.REVERSE
    r = factgen.render(t, ds.attribute_spec("credit_no"))
    assert "91110105MA77" in r.prompt_text
    assert "Credit-No" in r.prompt_text
    assert r.target_text == "AcmeCo"


def test_derive_reverse_ambiguity_lists_collisions():
    ds = _hand_corpus([("A Co", "111"), ("B Co", "111"), ("C Co", "222")])
    with pytest.raises(AmbiguityError) as exc:
        factgen.derive_reverse(ds, "credit_no")
    assert "A Co" in str(exc.value) and "B Co" in str(exc.value)


def test_derive_reverse_bijection():
    corpus = factgen.synth_corpus(
        factgen.schema_subset(factgen.default_schema("paper"), ["credit_no"]), 200, seed=8
    )
    rev = factgen.derive_reverse(corpus, "credit_no")
    assert len(rev) == len(corpus)
    back = {t.value: t.key for t in corpus.triples}
    for t in rev.triples:
        assert back[t.value] == t.key


def test_derive_reverse_requires_template():
    ds = factgen.synth_corpus(
        factgen.schema_subset(factgen.default_schema("paper"), ["longitude"]), 5, seed=1
    )
    with pytest.raises(UnsupportedAttributeError):
        factgen.derive_reverse(ds, "longitude")


# ---------------------------------------------------------------- two-hop

def _longitude_corpus(pairs):
    schema = factgen.schema_subset(factgen.default_schema("paper"), ["longitude"])
    triples = tuple(
        factgen.FactTriple(key=k, attribute="longitude", value=v) for k, v in pairs
    )
    return factgen.FactDataset(triples=triples, schema=schema, seed=0)


def test_two_hop_longitude_gap_by_hand():
    # 116.497976 - 110.493990 = 6.003986, six decimals exactly
    ds = _longitude_corpus([("East Co", "116.497976"), ("West Co", "110.493990")])
    two = factgen.derive_two_hop(ds, "longitude", num_pairs=2, seed=0)
    gaps = {(t.key, t.second_key): t.value for t in two.triples}
    assert gaps[("East Co", "West Co")] == "6.003986"
    assert gaps[("West Co", "East Co")] == "-6.003986"


def test_two_hop_excludes_self_pair_and_zero_formats():
    ds = _longitude_corpus([("A Co", "100.000000"), ("B Co", "100.000000")])
    two = factgen.derive_two_hop(ds, "longitude", num_pairs=2, seed=1)
    for t in two.triples:
        assert t.key != t.second_key
        assert t.value == "0.000000"


def test_two_hop_date_gap_calendar_oracle():
    import datetime
    schema = factgen.schema_subset(factgen.default_schema("paper"), ["start_date"])
    triples = (
        factgen.FactTriple(key="A Co", attribute="start_date", value="2003.11.02"),
        factgen.FactTriple(key="B Co", attribute="start_date", value="2003.11.15"),
    )
    ds = factgen.FactDataset(triples=triples, schema=schema, seed=0)
    two = factgen.derive_two_hop(ds, "start_date", num_pairs=2, seed=2)
    gaps = {(t.key, t.second_key): t.value for t in two.triples}
    oracle = (datetime.date(2003, 11, 2) - datetime.date(2003, 11, 15)).days
    assert gaps[("A Co", "B Co")] == str(oracle) == "-13"
    assert gaps[("B Co", "A Co")] == "13"


def test_two_hop_rejects_non_numeric():
    ds = factgen.synth_corpus(
        factgen.schema_subset(factgen.default_schema("paper"), ["operator"]), 5, seed=1
    )
    with pytest.raises(UnsupportedAttributeError):
        factgen.derive_two_hop(ds, "operator", num_pairs=2, seed=0)


# ---------------------------------------------------------------- upsample / split

def test_upsample_weights():
    corpus = factgen.synth_corpus(two_attr_schema(), 100, seed=2)
    up = factgen.upsample(corpus, {"longitude": 4})
    per_attr = {}
    for t in up.triples:
        per_attr[t.attribute] = per_attr.get(t.attribute, 0) + t.weight
    assert per_attr == {"longitude": 400, "operator": 100}
    assert sorted(t.identity for t in up.triples) == sorted(t.identity for t in corpus.triples)


def test_upsample_empty_identity():
    corpus = factgen.synth_corpus(two_attr_schema(), 10, seed=2)
    assert factgen.upsample(corpus, {}) == corpus


def test_upsample_zero_factor_rejected():
    corpus = factgen.synth_corpus(two_attr_schema(), 10, seed=2)
    with pytest.raises(RangeError):
        factgen.upsample(corpus, {"longitude": 0})


def test_split_heldout_counts_and_disjoint():
    corpus = factgen.synth_corpus(two_attr_schema(), 1000, seed=4)
    train, held = factgen.split_heldout(corpus, 0.1, seed=1)
    assert len(held.keys()) == 100
    assert not set(train.keys()) & set(held.keys())
    assert held.split == "heldout"


def test_split_heldout_two_keys():
    corpus = factgen.synth_corpus(two_attr_schema(), 2, seed=4)
    train, held = factgen.split_heldout(corpus, 0.5, seed=1)
    assert len(train.keys()) == len(held.keys()) == 1


def test_split_heldout_partition():
    corpus = factgen.synth_corpus(two_attr_schema(), 50, seed=4)
    train, held = factgen.split_heldout(corpus, 0.3, seed=2)
    merged = sorted(t.identity for t in train.triples + held.triples)
    assert merged == sorted(t.identity for t in corpus.triples)


def test_split_heldout_bad_fraction():
    corpus = factgen.synth_corpus(two_attr_schema(), 10, seed=4)
    for f in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(RangeError):
            factgen.split_heldout(corpus, f, seed=1)


# ---------------------------------------------------------------- render

def test_render_forward_paper_template():
    schema = factgen.schema_subset(factgen.default_schema("paper"), ["operator"])
    t = factgen.FactTriple(key="AcmeCo", attribute="operator", value="Li Zhang")
    r = factgen.render(t, schema[0], 0)
    assert r.prompt_text == (
        'In the company information table, the "Operator" of the company "AcmeCo" is:'
    )
    assert r.target_text == "Li Zhang"


def test_render_two_hop_key_order():
    schema = factgen.schema_subset(factgen.default_schema("paper"), ["longitude"])
    t = factgen.FactTriple(key="A Co", attribute="longitude", value="1.000000",
                           hop="two", second_key="B Co")
    r = factgen.render(t, schema[0])
    assert r.prompt_text.index("A Co") < r.prompt_text.index("B Co")


def test_render_bad_index():
    schema = factgen.schema_subset(factgen.default_schema("paper"), ["operator"])
    t = factgen.FactTriple(key="AcmeCo", attribute="operator", value="Li Zhang")
    with pytest.raises(RangeError):
        factgen.render(t, schema[0], 1)


def test_render_injective_collision_scan():
    corpus = factgen.synth_corpus(factgen.default_schema("compact")[:5], 2000, seed=6)
    specs = {a.id: a for a in corpus.schema}
    seen = {}
    for t in corpus.triples:
        r = factgen.render(t, specs[t.attribute], 0)
        ident = (t.key, t.attribute, t.direction)
        assert r.prompt_text not in seen or seen[r.prompt_text] == ident
        seen[r.prompt_text] = ident
    assert len(seen) == len(corpus)


def test_template_variants():
    schema = factgen.schema_subset(factgen.default_schema("compact"), ["operator"])
    spec = factgen.make_template_variants(schema[0], 32)
    assert len(spec.forward_templates) == 32
    assert len(set(spec.forward_templates)) == 32
    for tpl in spec.forward_templates:
        assert tpl.count("<K>") == 1


def test_template_assignment_modes():
    schema = factgen.schema_subset(factgen.default_schema("compact"), ["operator"])
    spec = factgen.make_template_variants(schema[0], 4)
    t = factgen.FactTriple(key="AcmeCo", attribute="operator", value="Li Zhang")
    fixed = factgen.template_index_for(t, spec, mode="hash")
    assert fixed == factgen.template_index_for(t, spec, mode="hash", epoch=9)
    assert factgen.template_index_for(t, spec, mode="rotate", epoch=5) == 1


# ---------------------------------------------------------------- IO

def test_corpus_jsonl_round_trip(tmp_path):
    schema = factgen.schema_subset(
        factgen.default_schema("compact"), ["operator", "longitude", "start_date"]
    )
    corpus = factgen.synth_corpus(schema, 50, seed=3)
    two = factgen.derive_two_hop(corpus.restrict(["longitude"]), "longitude", 10, seed=1)
    merged = factgen.merge([corpus, two])
    path = tmp_path / "corpus.jsonl"
    factgen.write_corpus(merged, path)
    loaded = factgen.read_corpus(path, schema)
    assert loaded.triples == merged.triples


def test_schema_json_round_trip(tmp_path):
    schema = factgen.default_schema("paper")
    path = tmp_path / "schema.json"
    factgen.schema_to_json(schema, path)
    assert factgen.schema_from_json(path) == schema


def test_wikidata_tsv_import(tmp_path):
    path = tmp_path / "slice.tsv"
    path.write_text(
        "Pale Fire\tauthor\tVladimir Nabokov\n"
        "Dune\tauthor\tFrank Herbert\n"
        "Paris\tcapital of\tFrance\n"
    )
    ds = factgen.import_wikidata_tsv(path)
    assert len(ds) == 3
    spec = ds.attribute_spec("author")
    t = next(t for t in ds.triples if t.key == "Dune")
    r = factgen.render(t, spec)
    assert r.prompt_text == "For this entity, Dune, the entity forming the relationship 'author' is:"
    assert r.target_text == "Frank Herbert"


def test_duplicate_identity_rejected():
    schema = factgen.schema_subset(factgen.default_schema("paper"), ["operator"])
    t = factgen.FactTriple(key="A", attribute="operator", value="X")
    with pytest.raises(ConfigurationError):
        factgen.FactDataset(triples=(t, t), schema=schema)


def test_template_placeholder_invariants():
    with pytest.raises(ConfigurationError):
        factgen.AttributeSpec(
            id="x", name="X", value_kind=factgen.person_name(),
            forward_templates=("no placeholder here",),
        )
    with pytest.raises(ConfigurationError):
        factgen.AttributeSpec(
            id="x", name="X", value_kind=factgen.person_name(),
            forward_templates=("ok <K>",), reverse_template="missing",
        )
