"""Synthetic fact-triple corpora: generation, derivation, rendering, and IO.

A corpus is a list of (key, attribute, value) triples over company-style keys.
Values are synthesized per attribute kind; some kinds deliberately correlate
with tokens of the key (region -> longitude, business word -> capital bucket)
so that generalization to unseen keys is possible, mirroring how real
company tables behave.
"""

from __future__ import annotations

import datetime as _dt
import json
import re
from dataclasses import dataclass, field, replace
from decimal import Decimal
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    AmbiguityError,
    ConfigurationError,
    RangeError,
    UnsupportedAttributeError,
)

FORWARD = "forward"
REVERSE = "reverse"

VALUE_KINDS = (
    "person_name",
    "id_digits",
    "date",
    "longitude",
    "categorical",
    "capital_bucket",
)

# Default two-hop prompt; <A> and <B> are the two keys, in order.
TWO_HOP_TEMPLATE = (
    'In the company information table, the difference in "{name}" '
    'between "<A>" and "<B>" is:'
)
TWO_HOP_TEMPLATE_COMPACT = 'The "{name}" gap between "<A>" and "<B>" is:'


@dataclass(frozen=True)
class ValueKind:
    """Value family of an attribute; ``length`` for id_digits, ``levels`` for categorical."""

    kind: str
    length: int | None = None
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in VALUE_KINDS:
            raise ConfigurationError(f"unknown value kind {self.kind!r}")
        if self.kind == "id_digits" and not self.length:
            raise ConfigurationError("id_digits needs a length")
        if self.kind == "categorical" and not self.levels:
            raise ConfigurationError("categorical needs levels")


def person_name() -> ValueKind:
    return ValueKind("person_name")


def id_digits(length: int) -> ValueKind:
    return ValueKind("id_digits", length=length)


def date() -> ValueKind:
    return ValueKind("date")


def longitude() -> ValueKind:
    return ValueKind("longitude")


def categorical(levels: Iterable[str]) -> ValueKind:
    return ValueKind("categorical", levels=tuple(levels))


def capital_bucket() -> ValueKind:
    return ValueKind("capital_bucket")


@dataclass(frozen=True)
class AttributeSpec:
    """One column of the synthetic table and how to render it as text."""

    id: str
    name: str
    value_kind: ValueKind
    forward_templates: tuple[str, ...]
    reverse_template: str | None = None
    correlated_with: tuple[str, Mapping[str, str]] | None = None
    numeric: bool = False
    twohop_template: str | None = None

    def __post_init__(self):
        if not self.forward_templates:
            raise ConfigurationError(f"attribute {self.id!r} needs >= 1 forward template")
        for t in self.forward_templates:
            if t.count("<K>") != 1:
                raise ConfigurationError(
                    f"forward template of {self.id!r} must contain exactly one <K>: {t!r}"
                )
        if self.reverse_template is not None and self.reverse_template.count("<V>") != 1:
            raise ConfigurationError(
                f"reverse template of {self.id!r} must contain exactly one <V>"
            )


@dataclass(frozen=True)
class FactTriple:
    key: str
    attribute: str
    value: str
    direction: str = FORWARD
    hop: str = "one"
    second_key: str | None = None
    weight: int = 1

    def __post_init__(self):
        if not self.value:
            raise ConfigurationError("triple value must be non-empty")
        if self.weight < 1:
            raise RangeError("triple weight must be >= 1")
        if self.hop == "two":
            if not self.second_key or self.second_key == self.key:
                raise ConfigurationError("two-hop triple needs two distinct keys")
        elif self.hop != "one":
            raise ConfigurationError(f"unknown hop {self.hop!r}")
        if self.direction not in (FORWARD, REVERSE):
            raise ConfigurationError(f"unknown direction {self.direction!r}")

    @property
    def identity(self) -> tuple:
        return (self.key, self.attribute, self.direction, self.hop, self.second_key)


@dataclass(frozen=True)
class FactDataset:
    triples: tuple[FactTriple, ...]
    schema: tuple[AttributeSpec, ...]
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        seen = set()
        for t in self.triples:
            if t.identity in seen:
                raise ConfigurationError(
                    f"duplicate triple identity {t.identity}; use weights for frequency"
                )
            seen.add(t.identity)

    def __len__(self) -> int:
        return len(self.triples)

    def keys(self) -> list[str]:
        """Distinct keys in first-appearance order."""
        out, seen = [], set()
        for t in self.triples:
            if t.key not in seen:
                seen.add(t.key)
                out.append(t.key)
        return out

    def attribute_spec(self, attr_id: str) -> AttributeSpec:
        for a in self.schema:
            if a.id == attr_id:
                return a
        raise UnsupportedAttributeError(f"attribute {attr_id!r} not in schema")

    def restrict(self, attr_ids: Iterable[str]) -> "FactDataset":
        wanted = set(attr_ids)
        return replace(self, triples=tuple(t for t in self.triples if t.attribute in wanted))

    def total_weight(self) -> int:
        return sum(t.weight for t in self.triples)


@dataclass(frozen=True)
class RenderedExample:
    prompt_text: str
    target_text: str
    template_index: int


# --------------------------------------------------------------------------
# name banks for key synthesis (region + business + suffix)

_REGIONS = [
    "Ashford", "Brinmore", "Caldwell", "Dunmore", "Eastvale", "Fernley",
    "Glenrock", "Harwick", "Ironbay", "Jasperton", "Kelsoe", "Larkfield",
    "Marlowe", "Northgate", "Oakhurst", "Pinecrest", "Quarrow", "Redcliff",
    "Stonebridge", "Thornbury", "Umberside", "Vailmont", "Westmere", "Yarrowick",
    "Zeltona", "Arbordale", "Bexley", "Cragmoor", "Dovershire", "Elmsworth",
    "Foxhollow", "Graythorne", "Hollybrook", "Inverness", "Junewood", "Kestrelmoor",
    "Lindenport", "Mosswood", "Netherfield", "Ormsby", "Pellbrook", "Quintara",
    "Rookhaven", "Silverford", "Tarnmouth", "Ulverton", "Vexbridge", "Wrenfield",
    "Amberlyn", "Blackmere", "Coldspring", "Dravenholm", "Everpine", "Frostvale",
    "Gildercrest", "Hazelmarch", "Ivoryton", "Jackdaw Point", "Kilnbrook", "Lowrydale",
    "Mirefield", "Nightingale", "Ostermoor", "Palegrove", "Quillstone", "Ravensmere",
    "Saltmarsh", "Tidewater", "Umbragale", "Violetford", "Windohaven", "Yewbranch",
    "Aldercroft", "Birchstead", "Copperline", "Duskwood", "Embermill", "Fallowick",
    "Goldenreach", "Heathergate", "Islemoor", "Juniper Flats", "Knollwater", "Lanternbay",
    "Mistralon", "Novamere", "Otterbrook", "Pressfield", "Quayworth", "Rimehollow",
    "Summercliff", "Tanglewood", "Underbough", "Vastermark", "Whitmoor", "Zephyr Hills",
]

_INDUSTRIES = [
    "Textile", "Granite", "Logistics", "Orchard", "Foundry", "Software",
    "Ceramics", "Shipping", "Printing", "Robotics", "Brewing", "Masonry",
    "Optics", "Timber", "Plastics", "Catering", "Roofing", "Glassware",
    "Seafood", "Furniture", "Paper", "Chemical", "Transport", "Packaging",
    "Electronics", "Machinery", "Apparel", "Hardware", "Dairy", "Milling",
    "Tooling", "Welding", "Farming", "Mining", "Fisheries", "Trading",
    "Consulting", "Catalytics", "Surveying", "Dredging", "Bottling", "Tanning",
    "Knitting", "Forging", "Quarrying", "Refrigeration", "Salvage", "Stevedore",
    "Signage", "Aviation", "Bakeries", "Cabling", "Decor", "Engraving",
    "Fencing", "Gardening", "Haulage", "Irrigation", "Joinery", "Kilnworks",
    "Laundry", "Metals", "Nurseries", "Outfitting", "Plumbing", "Rigging",
    "Scaffolding", "Telemetry", "Upholstery", "Varnish", "Weaving", "Yarncraft",
    "Archiving", "Bindery", "Cartage", "Distillery", "Etching", "Freight",
    "Gilding", "Hosiery",
]

_QUALIFIERS = [
    "Golden", "United", "Prime", "Sterling", "Pacific", "Summit", "Beacon",
    "Crescent", "Pioneer", "Harbor", "Anchor", "Vertex", "Cobalt", "Amber",
    "Cedar", "Falcon", "Granite", "Horizon", "Ivory", "Keystone", "Laurel",
    "Meridian", "Noble", "Onyx", "Paragon", "Quartz", "Regent", "Sapphire",
    "Titan", "Vanguard", "Willow", "Zenith", "Argent", "Borealis", "Cinder",
    "Drift", "Ember", "Frontier", "Gale", "Haven",
]

# suffix -> (company type, type code)
_SUFFIX_TABLE = [
    ("Co., Ltd.", "Co., Ltd.", "2190"),
    ("LLC", "Limited Liability Co.", "2250"),
    ("Group Co., Ltd.", "Group Co., Ltd.", "2310"),
    ("Holdings Ltd.", "Holdings Ltd.", "2440"),
    ("Partnership", "General Partnership", "2520"),
    ("Sole Prop.", "Sole Proprietorship", "2660"),
]

_TITLES = [
    "Executive Director", "General Manager", "Chairman", "Supervisor",
    "Person in Charge",
]
_TITLE_CODES = {
    "Executive Director": "490A",
    "General Manager": "432B",
    "Chairman": "410C",
    "Supervisor": "455D",
    "Person in Charge": "490F",
}

_FIRST_NAMES = [
    "Alden", "Briar", "Corin", "Darya", "Edric", "Faye", "Garnet", "Hollis",
    "Imara", "Joss", "Kiran", "Lior", "Marit", "Nolan", "Orla", "Petra",
    "Quill", "Rowan", "Selby", "Tamsin", "Ulric", "Vesper", "Wynne", "Xara",
    "Yorick", "Zinnia", "Ansel", "Bellamy", "Cyra", "Dorian", "Elow", "Fenwick",
    "Galen", "Halcyon", "Isolde", "Jorah", "Kestrel", "Lennix", "Maren", "Nerys",
    "Oberon", "Pallas", "Quenby", "Rhett", "Sorrel", "Thane", "Una", "Varek",
    "Wilder", "Yara", "Zephyrine", "Arlo", "Blythe", "Caspian", "Delphine",
    "Emrys", "Fiora", "Gideon", "Hesper", "Idris", "Juniper", "Kelda", "Lucian",
    "Mireille", "Niamh", "Osric", "Perrin", "Quinlan", "Romilly", "Soren",
    "Tindra", "Ulyana", "Vance", "Wrenna", "Xanthe", "Ysolt", "Zared",
    "Amara", "Bennett", "Cordell",
]
_LAST_NAMES = [
    "Ashdown", "Blackwood", "Carmody", "Danvers", "Ellery", "Fairbairn",
    "Gresham", "Hollowell", "Ingersoll", "Jessop", "Kirkwood", "Lockhart",
    "Merriweather", "Northcote", "Okonkwo", "Pemberton", "Quambley", "Ravenscroft",
    "Stanhope", "Thistlewood", "Underhill", "Vandermeer", "Whitlock", "Yardley",
    "Zelinsky", "Abernathy", "Birtwistle", "Culpepper", "Dunleavy", "Eastgate",
    "Fanshawe", "Goldsworth", "Harrowgate", "Illingworth", "Jocelyn", "Kingsley",
    "Lindqvist", "Montclair", "Nethersole", "Ormerod", "Pickersgill", "Quennell",
    "Rothwell", "Silvester", "Tremaine", "Uppingham", "Verity", "Wolstenholme",
    "Yeardley", "Zagreb", "Attenborough", "Brockhurst", "Calloway", "Dimbleby",
    "Everhart", "Fothergill", "Greenhalgh", "Honeycutt", "Ironside", "Jennings",
    "Kershaw", "Loxley", "Marchbanks", "Nightingale", "Oswin", "Pilkington",
    "Quickfall", "Redfern", "Satterthwaite", "Tolliver", "Umberton", "Vickery",
    "Wainwright", "Yoxall", "Zeller", "Applethorpe", "Birchall", "Crowhurst",
]


def _region_base_longitude(region: str) -> Decimal:
    """Stable per-region base longitude in [75, 135] with 6 decimals."""
    h = 2166136261
    for b in region.encode():
        h = ((h ^ b) * 16777619) & 0xFFFFFFFF
    frac = h / 2**32
    return Decimal(int(round((75.0 + 60.0 * frac) * 10**6))) / 10**6


def _region_of_key(key: str) -> str:
    return key.split(" ")[0]


# --------------------------------------------------------------------------
# schema construction

_PAPER_FORWARD = 'In the company information table, the "{name}" of the company "<K>" is:'
_PAPER_REVERSE = 'In the company information table, the company with the "{name}" as <V> is:'
_COMPACT_FORWARD = 'The "{name}" of company "<K>" is:'
_COMPACT_REVERSE = 'The company with "{name}" <V> is:'


def _attr(
    attr_id: str,
    name: str,
    kind: ValueKind,
    style: str,
    reversible: bool = False,
    numeric: bool = False,
    correlated_with: tuple[str, Mapping[str, str]] | None = None,
) -> AttributeSpec:
    fwd = (_PAPER_FORWARD if style == "paper" else _COMPACT_FORWARD).format(name=name)
    rev = None
    if reversible:
        rev = (_PAPER_REVERSE if style == "paper" else _COMPACT_REVERSE).format(name=name)
    two = (TWO_HOP_TEMPLATE if style == "paper" else TWO_HOP_TEMPLATE_COMPACT).format(name=name)
    return AttributeSpec(
        id=attr_id,
        name=name,
        value_kind=kind,
        forward_templates=(fwd,),
        reverse_template=rev,
        correlated_with=correlated_with,
        numeric=numeric,
        twohop_template=two if numeric else None,
    )


def default_schema(style: str = "paper") -> tuple[AttributeSpec, ...]:
    """Company-table-like schema: names, ids, dates, coordinates, correlated codes."""
    if style not in ("paper", "compact"):
        raise ConfigurationError(f"unknown template style {style!r}")
    type_levels = tuple(t for _, t, _ in _SUFFIX_TABLE)
    type_code_map = {t: c for _, t, c in _SUFFIX_TABLE}
    return (
        _attr("credit_no", "Credit-No", id_digits(15), style, reversible=True),
        _attr("operator", "Operator", person_name(), style, reversible=True),
        _attr("register_no", "Register-No", id_digits(13), style, reversible=True),
        _attr("start_date", "Start-Date", date(), style, numeric=True),
        _attr("longitude", "Longitude", longitude(), style, numeric=True),
        _attr("title", "Title", categorical(_TITLES), style),
        _attr(
            "title_code", "Title-Code", categorical(tuple(_TITLE_CODES.values())), style,
            correlated_with=("title", dict(_TITLE_CODES)),
        ),
        _attr("type", "Type", categorical(type_levels), style),
        _attr(
            "type_code", "Type-Code", categorical(tuple(type_code_map.values())), style,
            correlated_with=("type", type_code_map),
        ),
        _attr("capital", "Register-Capital", capital_bucket(), style),
    )


def schema_subset(schema: Iterable[AttributeSpec], attr_ids: Iterable[str]) -> tuple[AttributeSpec, ...]:
    by_id = {a.id: a for a in schema}
    out = []
    for aid in attr_ids:
        if aid not in by_id:
            raise UnsupportedAttributeError(f"attribute {aid!r} not in schema")
        out.append(by_id[aid])
    return tuple(out)


def make_template_variants(spec: AttributeSpec, count: int) -> AttributeSpec:
    """Expand an attribute to ``count`` paraphrased forward templates."""
    if count < 1:
        raise RangeError("template count must be >= 1")
    prefixes = [
        "", "Per the registry, ", "Records show: ", "From the filings, ",
        "According to the table, ", "As registered, ", "Official entry: ",
        "In the ledger, ",
    ]
    bases = [
        'the "{name}" of company "<K>" is:',
        'company "<K>" lists its "{name}" as:',
        'for "<K>" the "{name}" reads:',
        'the field "{name}" for "<K>" holds:',
    ]
    variants = []
    for i in range(count):
        p = prefixes[i % len(prefixes)]
        b = bases[(i // len(prefixes)) % len(bases)]
        text = (p + b).format(name=spec.name)
        variants.append(text[0].upper() + text[1:])
    return replace(spec, forward_templates=tuple(variants))


# --------------------------------------------------------------------------
# value synthesis

def _gen_key(rng: np.random.Generator, used: set[str], style: str, counter: int) -> str:
    for _ in range(64):
        region = _REGIONS[rng.integers(len(_REGIONS))]
        industry = _INDUSTRIES[rng.integers(len(_INDUSTRIES))]
        suffix = _SUFFIX_TABLE[rng.integers(len(_SUFFIX_TABLE))][0]
        if style == "long":
            qual = _QUALIFIERS[rng.integers(len(_QUALIFIERS))]
            key = f"{region} {qual} {industry} {suffix}"
        else:
            key = f"{region} {industry} {suffix}"
        if key not in used:
            return key
    # dense corner of the name space: disambiguate deterministically
    return f"{region} {industry} No. {counter} {suffix}"


def _industry_of_key(key: str) -> str:
    parts = key.split(" ")
    return parts[1] if len(parts) > 1 else parts[0]


def _gen_value(spec: AttributeSpec, key: str, rng: np.random.Generator) -> str:
    kind = spec.value_kind
    if kind.kind == "person_name":
        first = _FIRST_NAMES[rng.integers(len(_FIRST_NAMES))]
        last = _LAST_NAMES[rng.integers(len(_LAST_NAMES))]
        return f"{first} {last}"
    if kind.kind == "id_digits":
        digits = rng.integers(0, 10, size=kind.length)
        digits[0] = rng.integers(1, 10)
        return "".join(str(d) for d in digits)
    if kind.kind == "date":
        year = int(rng.integers(1990, 2021))
        month = int(rng.integers(1, 13))
        day = int(rng.integers(1, 29))
        return f"{year:04d}.{month:02d}.{day:02d}"
    if kind.kind == "longitude":
        base = _region_base_longitude(_region_of_key(key))
        if rng.random() < 0.5:
            return f"{base:.6f}"
        jitter = Decimal(int(rng.integers(-500000, 500001))) / 10**6
        return f"{base + jitter:.6f}"
    if kind.kind == "categorical":
        return kind.levels[rng.integers(len(kind.levels))]
    if kind.kind == "capital_bucket":
        h = sum(_industry_of_key(key).encode()) % 5  # industry implies size class
        power = 4 + h + int(rng.integers(0, 2))
        return f"CNY 10^{power}"
    raise ConfigurationError(f"unknown value kind {kind.kind!r}")


def synth_corpus(
    schema: Iterable[AttributeSpec],
    num_keys: int,
    seed: int,
    key_style: str = "short",
) -> FactDataset:
    """Generate ``num_keys`` keys with one forward triple per schema attribute."""
    schema = tuple(schema)
    if not schema:
        raise ConfigurationError("schema must not be empty")
    if num_keys < 1:
        raise RangeError("num_keys must be >= 1")
    _check_correlations(schema)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    used: set[str] = set()
    keys = []
    for i in range(num_keys):
        key = _gen_key(rng, used, key_style, i)
        used.add(key)
        keys.append(key)

    triples = []
    for key in keys:
        values: dict[str, str] = {}
        for spec in schema:
            if spec.correlated_with is not None:
                partner, value_map = spec.correlated_with
                value = value_map[values[partner]]
            else:
                value = _gen_value(spec, key, rng)
            values[spec.id] = value
            triples.append(FactTriple(key=key, attribute=spec.id, value=value))
    return FactDataset(triples=tuple(triples), schema=schema, split="train", seed=seed)


def _check_correlations(schema: tuple[AttributeSpec, ...]) -> None:
    ids = [a.id for a in schema]
    for spec in schema:
        if spec.correlated_with is None:
            continue
        partner, value_map = spec.correlated_with
        if partner not in ids or ids.index(partner) >= ids.index(spec.id):
            raise ConfigurationError(
                f"correlated attribute {spec.id!r} must follow its partner {partner!r}"
            )
        partner_spec = schema[ids.index(partner)]
        levels = partner_spec.value_kind.levels or ()
        missing = [lv for lv in levels if lv not in value_map]
        if missing:
            raise ConfigurationError(
                f"value map of {spec.id!r} misses partner levels {missing}"
            )


# --------------------------------------------------------------------------
# sampling, splitting, derivation

def sample_facts(corpus: FactDataset, num_keys: int, seed: int) -> FactDataset:
    """All triples of a uniformly sampled key subset (attribute mix preserved)."""
    keys = corpus.keys()
    if num_keys > len(keys):
        raise RangeError(f"num_keys {num_keys} exceeds {len(keys)} available keys")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A11]))
    chosen = set(rng.choice(len(keys), size=num_keys, replace=False).tolist())
    keep = {keys[i] for i in chosen}
    triples = tuple(t for t in corpus.triples if t.key in keep)
    return replace(corpus, triples=triples, seed=seed)


def split_heldout(
    corpus: FactDataset, heldout_fraction: float, seed: int
) -> tuple[FactDataset, FactDataset]:
    """Key-disjoint train/heldout partition; every key's triples stay together."""
    if not 0.0 < heldout_fraction < 1.0:
        raise RangeError("heldout_fraction must be in (0, 1)")
    keys = corpus.keys()
    if len(keys) < 2:
        raise RangeError("need >= 2 keys to split")
    n_held = int(round(heldout_fraction * len(keys)))
    n_held = max(1, min(len(keys) - 1, n_held))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B71]))
    order = rng.permutation(len(keys))
    held = {keys[i] for i in order[:n_held]}
    train_triples = tuple(t for t in corpus.triples if t.key not in held)
    held_triples = tuple(t for t in corpus.triples if t.key in held)
    return (
        replace(corpus, triples=train_triples, split="train", seed=seed),
        replace(corpus, triples=held_triples, split="heldout", seed=seed),
    )


def derive_reverse(dataset: FactDataset, attribute: str) -> FactDataset:
    """Reverse triples (value -> key) for one attribute; values must be unique."""
    spec = dataset.attribute_spec(attribute)
    if spec.reverse_template is None:
        raise UnsupportedAttributeError(f"attribute {attribute!r} has no reverse template")
    forward = [t for t in dataset.triples if t.attribute == attribute and t.direction == FORWARD and t.hop == "one"]
    by_value: dict[str, list[str]] = {}
    for t in forward:
        by_value.setdefault(t.value, []).append(t.key)
    collisions = {v: ks for v, ks in by_value.items() if len(ks) > 1}
    if collisions:
        listing = "; ".join(f"{v!r} -> {ks}" for v, ks in sorted(collisions.items())[:10])
        raise AmbiguityError(
            f"{len(collisions)} values shared by several keys: {listing}",
            collisions=sorted(collisions.items()),
        )
    reversed_triples = tuple(
        FactTriple(key=t.key, attribute=attribute, value=t.value, direction=REVERSE, weight=t.weight)
        for t in forward
    )
    return replace(dataset, triples=reversed_triples)


def derive_two_hop(
    dataset: FactDataset, attribute: str, num_pairs: int, seed: int
) -> FactDataset:
    """Signed value gaps over sampled distinct key pairs of a numeric attribute."""
    spec = dataset.attribute_spec(attribute)
    if not spec.numeric:
        raise UnsupportedAttributeError(f"attribute {attribute!r} is not numeric")
    facts = {
        t.key: t.value
        for t in dataset.triples
        if t.attribute == attribute and t.direction == FORWARD and t.hop == "one"
    }
    keys = list(facts)
    if len(keys) < 2:
        raise RangeError("need >= 2 keys with this attribute for two-hop gaps")
    max_pairs = len(keys) * (len(keys) - 1)
    if num_pairs > max_pairs:
        raise RangeError(f"num_pairs {num_pairs} exceeds {max_pairs} ordered pairs")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x2B0B]))
    pairs: set[tuple[int, int]] = set()
    ordered: list[tuple[int, int]] = []
    while len(ordered) < num_pairs:
        a = int(rng.integers(len(keys)))
        b = int(rng.integers(len(keys)))
        if a == b or (a, b) in pairs:
            continue
        pairs.add((a, b))
        ordered.append((a, b))
    triples = []
    for a, b in ordered:
        ka, kb = keys[a], keys[b]
        gap = value_gap(spec, facts[ka], facts[kb])
        triples.append(
            FactTriple(key=ka, attribute=attribute, value=gap, hop="two", second_key=kb)
        )
    return replace(dataset, triples=tuple(triples))


def value_gap(spec: AttributeSpec, value_a: str, value_b: str) -> str:
    """Canonical rendering of value(A) - value(B) for a numeric attribute."""
    kind = spec.value_kind.kind
    if kind == "longitude":
        gap = Decimal(value_a) - Decimal(value_b)
        return f"{gap:.6f}"
    if kind == "date":
        da = _dt.date(*(int(p) for p in value_a.split(".")))
        db = _dt.date(*(int(p) for p in value_b.split(".")))
        return str((da - db).days)
    raise UnsupportedAttributeError(f"no gap rule for value kind {kind!r}")


def upsample(dataset: FactDataset, factors: Mapping[str, int]) -> FactDataset:
    """Multiply triple weights per attribute; the triple identity set is unchanged."""
    schema_ids = {a.id for a in dataset.schema}
    for attr, f in factors.items():
        if attr not in schema_ids:
            raise UnsupportedAttributeError(f"attribute {attr!r} not in schema")
        if f < 1:
            raise RangeError(f"upsample factor for {attr!r} must be >= 1")
    triples = tuple(
        replace(t, weight=t.weight * factors[t.attribute]) if t.attribute in factors else t
        for t in dataset.triples
    )
    return replace(dataset, triples=triples)


def merge(datasets: Iterable[FactDataset]) -> FactDataset:
    """Concatenate datasets; schemas are unioned by attribute id."""
    datasets = list(datasets)
    if not datasets:
        raise ConfigurationError("nothing to merge")
    schema: dict[str, AttributeSpec] = {}
    triples: list[FactTriple] = []
    for ds in datasets:
        for a in ds.schema:
            schema.setdefault(a.id, a)
        triples.extend(ds.triples)
    return FactDataset(
        triples=tuple(triples),
        schema=tuple(schema.values()),
        split=datasets[0].split,
        seed=datasets[0].seed,
    )


# --------------------------------------------------------------------------
# rendering

def template_index_for(triple: FactTriple, spec: AttributeSpec, mode: str = "hash", epoch: int = 0) -> int:
    """Template choice when an attribute has several: fixed per-triple hash, or per-epoch rotation."""
    n = len(spec.forward_templates)
    if n == 1 or triple.direction == REVERSE or triple.hop == "two":
        return 0
    if mode == "hash":
        h = 2166136261
        for b in f"{triple.key}|{triple.attribute}|{triple.direction}".encode():
            h = ((h ^ b) * 16777619) & 0xFFFFFFFF
        return h % n
    if mode == "rotate":
        return epoch % n
    raise ConfigurationError(f"unknown template mode {mode!r}")


def render(triple: FactTriple, spec: AttributeSpec, template_index: int = 0) -> RenderedExample:
    """Substitute placeholders; no other text mutation."""
    if triple.hop == "two":
        if template_index != 0:
            raise RangeError("two-hop rendering has a single template")
        template = spec.twohop_template or TWO_HOP_TEMPLATE.format(name=spec.name)
        prompt = template.replace("<A>", triple.key).replace("<B>", triple.second_key)
        return RenderedExample(prompt, triple.value, 0)
    if triple.direction == REVERSE:
        if spec.reverse_template is None:
            raise UnsupportedAttributeError(f"attribute {spec.id!r} has no reverse template")
        if template_index != 0:
            raise RangeError("reverse rendering has a single template")
        prompt = spec.reverse_template.replace("<V>", triple.value)
        return RenderedExample(prompt, triple.key, 0)
    if not 0 <= template_index < len(spec.forward_templates):
        raise RangeError(
            f"template index {template_index} out of range for {len(spec.forward_templates)} templates"
        )
    prompt = spec.forward_templates[template_index].replace("<K>", triple.key)
    return RenderedExample(prompt, triple.value, template_index)


# --------------------------------------------------------------------------
# serialization

def write_corpus(dataset: FactDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in dataset.triples:
            row = {
                "key": t.key,
                "attribute": t.attribute,
                "value": t.value,
                "direction": t.direction,
                "hop": t.hop,
                "weight": t.weight,
            }
            if t.second_key is not None:
                row["second_key"] = t.second_key
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_corpus(path, schema: Iterable[AttributeSpec], split: str = "train", seed: int = 0) -> FactDataset:
    triples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            triples.append(
                FactTriple(
                    key=row["key"],
                    attribute=row["attribute"],
                    value=row["value"],
                    direction=row.get("direction", FORWARD),
                    hop=row.get("hop", "one"),
                    second_key=row.get("second_key"),
                    weight=int(row.get("weight", 1)),
                )
            )
    return FactDataset(triples=tuple(triples), schema=tuple(schema), split=split, seed=seed)


def schema_to_json(schema: Iterable[AttributeSpec], path) -> None:
    rows = []
    for a in schema:
        rows.append(
            {
                "id": a.id,
                "name": a.name,
                "value_kind": {
                    "kind": a.value_kind.kind,
                    "length": a.value_kind.length,
                    "levels": list(a.value_kind.levels) if a.value_kind.levels else None,
                },
                "forward_templates": list(a.forward_templates),
                "reverse_template": a.reverse_template,
                "correlated_with": (
                    [a.correlated_with[0], dict(a.correlated_with[1])]
                    if a.correlated_with
                    else None
                ),
                "numeric": a.numeric,
                "twohop_template": a.twohop_template,
            }
        )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, ensure_ascii=False)


def schema_from_json(path) -> tuple[AttributeSpec, ...]:
    with open(path, encoding="utf-8") as fh:
        rows = json.load(fh)
    out = []
    for r in rows:
        vk = r["value_kind"]
        out.append(
            AttributeSpec(
                id=r["id"],
                name=r["name"],
                value_kind=ValueKind(
                    vk["kind"],
                    length=vk.get("length"),
                    levels=tuple(vk["levels"]) if vk.get("levels") else None,
                ),
                forward_templates=tuple(r["forward_templates"]),
                reverse_template=r.get("reverse_template"),
                correlated_with=(
                    (r["correlated_with"][0], r["correlated_with"][1])
                    if r.get("correlated_with")
                    else None
                ),
                numeric=bool(r.get("numeric", False)),
                twohop_template=r.get("twohop_template"),
            )
        )
    return tuple(out)


_WIKI_TEMPLATE = "For this entity, <K>, the entity forming the relationship '{name}' is:"


def import_wikidata_tsv(path, seed: int = 0) -> FactDataset:
    """Tab-separated (subject, relation, object) lines via one unified template per relation."""
    triples: list[FactTriple] = []
    specs: dict[str, AttributeSpec] = {}
    seen: set[tuple] = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ConfigurationError(f"expected 3 tab-separated fields, got {len(parts)}: {line!r}")
            subj, rel, obj = parts
            attr_id = re.sub(r"[^a-z0-9]+", "_", rel.lower()).strip("_") or "relation"
            if attr_id not in specs:
                specs[attr_id] = AttributeSpec(
                    id=attr_id,
                    name=rel,
                    value_kind=categorical((obj,)),
                    forward_templates=(_WIKI_TEMPLATE.format(name=rel),),
                )
            t = FactTriple(key=subj, attribute=attr_id, value=obj)
            if t.identity in seen:
                continue
            seen.add(t.identity)
            triples.append(t)
    if not triples:
        raise ConfigurationError("no triples in file")
    return FactDataset(triples=tuple(triples), schema=tuple(specs.values()), seed=seed)
