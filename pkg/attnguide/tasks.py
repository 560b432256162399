# Copyright 2020 The attnguide Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Dataset generation for the lookup-tables and symbol-rewriting tasks.

Lookup tables: random bijections over 3-bit strings. A source is an input string followed by
table names in application order, the target echoes the input and then every intermediate
result, and step t of the target attends source position t.

Symbol rewriting: every input symbol owns three families of 16 variant tokens. An input symbol
is rewritten as one token from each of its families in any order; output steps 3i..3i+2
attend input position i.
"""

import json
import os
from collections import OrderedDict
from itertools import product
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from attnguide.errors import ConfigurationError, DataError
from attnguide.validation import ConfigSchemas, validate_document

SOS = "<sos>"
EOS = "<eos>"

SPEC_FILE = "spec.json"
VOCAB_FILE = "vocab.tsv"

Tables = Dict[str, Dict[str, str]]


class Example(NamedTuple):
    source: Tuple[str, ...]
    target: Tuple[str, ...]
    ag_target: Tuple[int, ...]


class Vocabulary:
    """
    Token to id mapping. Special tokens are appended after the regular ones.
    """

    def __init__(self, tokens: Iterable[str], specials: Sequence[str] = ()):
        self.tokens = list(tokens) + list(specials)
        self.specials = tuple(specials)
        self._index = {token: i for i, token in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ConfigurationError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.specials == other.specials

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise DataError(f"token {token!r} is not in the vocabulary") from None

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.index(token) for token in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def regular_tokens(self) -> List[str]:
        return self.tokens[:len(self.tokens) - len(self.specials)]


def target_vocabulary(tokens: Iterable[str]) -> Vocabulary:
    return Vocabulary(tokens, specials=(SOS, EOS))


class DatasetBundle:
    """
    Named splits of Examples with their vocabularies and the spec that produced them.
    """

    def __init__(self, task: str, splits: "OrderedDict[str, List[Example]]", source_vocab: Vocabulary,
                 target_vocab: Vocabulary, spec: dict):
        self.task = task
        self.splits = OrderedDict(splits)
        self.source_vocab = source_vocab
        self.target_vocab = target_vocab
        self.spec = spec

    def __eq__(self, other):
        return (isinstance(other, DatasetBundle) and self.task == other.task
                and list(self.splits.items()) == list(other.splits.items())
                and self.source_vocab == other.source_vocab and self.target_vocab == other.target_vocab
                and self.spec == other.spec)

    def split(self, name: str) -> List[Example]:
        if name not in self.splits:
            raise ConfigurationError(f"unknown split {name}, available: {', '.join(self.splits)}")
        return self.splits[name]

    def has_ag_targets(self, name: Optional[str] = None) -> bool:
        """
        True when every example (of one split, or of all splits) carries one AG index per target token.
        """
        names = [name] if name is not None else list(self.splits)
        return all(len(ex.ag_target) == len(ex.target) for n in names for ex in self.split(n))

    def tables(self) -> Tables:
        return self.spec["tables"]

    def grammar(self) -> "Grammar":
        return Grammar.from_dict(self.spec["grammar"])


# ---------------------------------------------------------------------------------------------- lookup


class LookupTaskSpec:
    """
    Parameters of a lookup-tables corpus. The last two tables are reserved: they appear in
    training only atomically.
    """

    def __init__(self, seed: int = 1, heldout_inputs_per_composition: int = 2, heldout_composition_count: int = 8,
                 longer_lengths: Sequence[int] = (), longer_count: int = 100, n_tables: int = 8, bits: int = 3):
        self.seed = seed
        self.n_tables = n_tables
        self.bits = bits
        self.heldout_inputs_per_composition = heldout_inputs_per_composition
        self.heldout_composition_count = heldout_composition_count
        self.longer_lengths = list(longer_lengths)
        self.longer_count = longer_count

    @property
    def table_names(self) -> List[str]:
        return [f"t{i + 1}" for i in range(self.n_tables)]

    @property
    def reserved_tables(self) -> List[str]:
        return self.table_names[-2:]

    @property
    def inputs(self) -> List[str]:
        return [format(i, f"0{self.bits}b") for i in range(2 ** self.bits)]

    def check(self):
        n_inputs = 2 ** self.bits
        n_pairs = (self.n_tables - 2) ** 2
        if not 0 <= self.heldout_inputs_per_composition < n_inputs:
            raise ConfigurationError(
                f"heldout inputs per composition must be below {n_inputs}, got {self.heldout_inputs_per_composition}")
        if not 0 <= self.heldout_composition_count <= n_pairs:
            raise ConfigurationError(
                f"at most {n_pairs} compositions can be held out, got {self.heldout_composition_count}")
        if any(length < 3 for length in self.longer_lengths):
            raise ConfigurationError(f"longer compositions need length >= 3, got {self.longer_lengths}")

    def to_dict(self) -> dict:
        return {
            "task": "lookup",
            "seed": self.seed,
            "n_tables": self.n_tables,
            "bits": self.bits,
            "heldout_inputs_per_composition": self.heldout_inputs_per_composition,
            "heldout_composition_count": self.heldout_composition_count,
            "longer_lengths": list(self.longer_lengths),
            "longer_count": self.longer_count
        }


def generate_atomic_tables(rng: np.random.Generator, n_tables: int = 8, bits: int = 3) -> Tables:
    """
    Samples pairwise-distinct uniformly random bijections on the bit strings of the given width.

    Returns:
        dict: table name (t1, t2, ...) to {input: output}
    """
    inputs = [format(i, f"0{bits}b") for i in range(2 ** bits)]
    tables = OrderedDict()
    seen = set()
    while len(tables) < n_tables:
        perm = tuple(int(i) for i in rng.permutation(len(inputs)))
        if perm in seen:
            continue
        seen.add(perm)
        tables[f"t{len(tables) + 1}"] = OrderedDict((inputs[i], inputs[j]) for i, j in enumerate(perm))
    return tables


def apply_composition(input_bits: str, table_names: Sequence[str], tables: Tables) -> Tuple[str, ...]:
    """
    Applies the tables in the given order.

    Args:
        input_bits (str): e.g. "001"
        table_names (list): e.g. ["t2", "t1"], t2 is applied first
        tables (dict): name to mapping; "id" may be given as any mapping

    Returns:
        tuple: the input followed by every intermediate result
    """
    target = [input_bits]
    for name in table_names:
        if name not in tables:
            raise DataError(f"unknown table {name}")
        try:
            target.append(tables[name][target[-1]])
        except KeyError:
            raise DataError(f"table {name} has no entry for {target[-1]}") from None
    return tuple(target)


def lookup_ag_targets(example: Example) -> Tuple[int, ...]:
    """
    Step t attends source position t.
    """
    return tuple(range(len(example.target)))


def lookup_example(input_bits: str, table_names: Sequence[str], tables: Tables) -> Example:
    source = (input_bits,) + tuple(table_names)
    target = apply_composition(input_bits, table_names, tables)
    return Example(source, target, tuple(range(len(target))))


def longer_compositions(tables: Tables, length: int, rng: np.random.Generator, count: int) -> List[Example]:
    """
    Random compositions of `length` tables drawn from all tables, each on a random input.
    """
    if length < 3:
        raise ConfigurationError(f"longer compositions need length >= 3, got {length}")
    names = list(tables)
    inputs = list(next(iter(tables.values())))
    examples = []
    for _ in range(count):
        chosen = [names[int(i)] for i in rng.integers(0, len(names), size=length)]
        examples.append(lookup_example(inputs[int(rng.integers(0, len(inputs)))], chosen, tables))
    return examples


def build_lookup_splits(spec: LookupTaskSpec, rng: Optional[np.random.Generator] = None) -> DatasetBundle:
    """
    Builds the five lookup splits (plus longer_<L> splits when requested).

    train:                all atomic tables on all inputs, and the training compositions of two
                          non-reserved tables on all but k of the inputs
    heldout_inputs:       the k removed inputs of every training composition
    heldout_compositions: the held-out non-reserved pairs on all inputs
    heldout_tables:       pairs mixing a non-reserved and a reserved table
    new_compositions:     pairs of reserved tables
    """
    spec.check()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    tables = generate_atomic_tables(rng, spec.n_tables, spec.bits)
    inputs = spec.inputs
    reserved = set(spec.reserved_tables)
    regular = [name for name in spec.table_names if name not in reserved]

    pairs = list(product(regular, regular))
    held = set(int(i) for i in rng.choice(len(pairs), size=spec.heldout_composition_count, replace=False))

    train = [lookup_example(bits, [name], tables) for name in spec.table_names for bits in inputs]
    heldout_inputs = []
    heldout_compositions = []
    for i, pair in enumerate(pairs):
        if i in held:
            heldout_compositions.extend(lookup_example(bits, pair, tables) for bits in inputs)
            continue
        removed = set(int(j) for j in rng.choice(len(inputs), size=spec.heldout_inputs_per_composition, replace=False))
        for j, bits in enumerate(inputs):
            (heldout_inputs if j in removed else train).append(lookup_example(bits, pair, tables))

    heldout_tables = []
    new_compositions = []
    for pair in product(spec.table_names, repeat=2):
        n_reserved = sum(name in reserved for name in pair)
        if n_reserved == 1:
            heldout_tables.extend(lookup_example(bits, pair, tables) for bits in inputs)
        elif n_reserved == 2:
            new_compositions.extend(lookup_example(bits, pair, tables) for bits in inputs)

    splits = OrderedDict([
        ("train", train),
        ("heldout_inputs", heldout_inputs),
        ("heldout_compositions", heldout_compositions),
        ("heldout_tables", heldout_tables),
        ("new_compositions", new_compositions)
    ])
    for length in spec.longer_lengths:
        longer_rng = np.random.default_rng([spec.seed, length])
        splits[f"longer_{length}"] = longer_compositions(tables, length, longer_rng, spec.longer_count)

    echo = spec.to_dict()
    echo["splits"] = list(splits)
    echo["tables"] = {name: dict(mapping) for name, mapping in tables.items()}
    return DatasetBundle("lookup", splits, Vocabulary(inputs + spec.table_names),
                         target_vocabulary(inputs), echo)


# ---------------------------------------------------------------------------------------------- symbol rewriting


class Grammar:
    """
    Input symbols x1..xN, each owning `families` lists of `variants` distinct output tokens.
    """

    def __init__(self, families: "OrderedDict[str, List[List[str]]]"):
        self.families = OrderedDict(families)
        self.owner = {}
        for symbol, symbol_families in self.families.items():
            for f, tokens in enumerate(symbol_families):
                for token in tokens:
                    if token in self.owner:
                        raise ConfigurationError(f"grammar token {token} is owned twice")
                    self.owner[token] = (symbol, f)

    @property
    def symbols(self) -> List[str]:
        return list(self.families)

    def output_tokens(self) -> List[str]:
        return [token for symbol_families in self.families.values() for tokens in symbol_families for token in tokens]

    def __eq__(self, other):
        return isinstance(other, Grammar) and list(self.families.items()) == list(other.families.items())

    def to_dict(self) -> dict:
        return {symbol: [list(tokens) for tokens in fams] for symbol, fams in self.families.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "Grammar":
        return cls(OrderedDict(sorted(((s, [list(t) for t in f]) for s, f in data.items()),
                                      key=lambda item: int(item[0][1:]))))


def generate_grammar(rng: np.random.Generator, n_symbols: int = 40, families: int = 3, variants: int = 16) -> Grammar:
    """
    Builds a grammar whose output tokens are a random permutation of o0000.. names, so token
    names carry no information about their owner.
    """
    total = n_symbols * families * variants
    ids = iter(int(i) for i in rng.permutation(total))
    width = len(str(total - 1))
    grammar = OrderedDict()
    for s in range(n_symbols):
        grammar[f"x{s + 1}"] = [[f"o{next(ids):0{width}d}" for _ in range(variants)] for _ in range(families)]
    return Grammar(grammar)


def sr_ag_targets(source_length: int, families: int = 3) -> Tuple[int, ...]:
    return tuple(j // families for j in range(families * source_length))


def sample_sr_example(grammar: Grammar, length: int, allow_repeats: bool, rng: np.random.Generator) -> Example:
    """
    Samples input symbols (without replacement unless repeats are allowed) and rewrites each as a
    random order of its families, each family realized by a random variant.
    """
    symbols = grammar.symbols
    if length < 1:
        raise ConfigurationError(f"symbol rewriting inputs need length >= 1, got {length}")
    if not allow_repeats and length > len(symbols):
        raise ConfigurationError(f"cannot draw {length} distinct symbols from {len(symbols)}")
    source = tuple(symbols[int(i)] for i in rng.choice(len(symbols), size=length, replace=allow_repeats))
    target = []
    for symbol in source:
        symbol_families = grammar.families[symbol]
        for f in rng.permutation(len(symbol_families)):
            tokens = symbol_families[int(f)]
            target.append(tokens[int(rng.integers(0, len(tokens)))])
    return Example(source, tuple(target), sr_ag_targets(length, len(grammar.families[symbols[0]])))


def grammar_consistent(source: Sequence[str], target: Sequence[str], grammar: Grammar) -> bool:
    """
    True iff every input symbol is rewritten as tokens of its own alphabet covering every family once.
    """
    n_families = len(grammar.families[grammar.symbols[0]])
    if len(target) != n_families * len(source):
        return False
    for i, symbol in enumerate(source):
        block = target[n_families * i:n_families * (i + 1)]
        owners = [grammar.owner.get(token) for token in block]
        if any(owner is None or owner[0] != symbol for owner in owners):
            return False
        if len({owner[1] for owner in owners}) != n_families:
            return False
    return True


class SymbolRewritingSpec:
    """
    Split sizes and length ranges for a symbol-rewriting corpus.
    """

    LENGTHS = OrderedDict([
        ("train", (5, 10, False)),
        ("validation", (3, 12, True)),
        ("standard", (5, 10, False)),
        ("repeat", (5, 10, True)),
        ("short", (1, 4, False)),
        ("long", (11, 15, False))
    ])

    FULL_TRAIN_SIZE = 100000

    def __init__(self, seed: int = 1, train_size: int = 10000, test_size: int = 500, validation_size: int = 1000,
                 full_scale: bool = False):
        self.seed = seed
        self.train_size = self.FULL_TRAIN_SIZE if full_scale else train_size
        self.test_size = test_size
        self.validation_size = validation_size
        self.full_scale = full_scale

    def size(self, split: str) -> int:
        if split == "train":
            return self.train_size
        if split == "validation":
            return self.validation_size
        return self.test_size

    def to_dict(self) -> dict:
        return {
            "task": "sr",
            "seed": self.seed,
            "n_input_symbols": 40,
            "families_per_symbol": 3,
            "variants_per_family": 16,
            "train_size": self.train_size,
            "test_size": self.test_size,
            "validation_size": self.validation_size,
            "full_scale": self.full_scale
        }


def build_sr_splits(spec: SymbolRewritingSpec, grammar: Optional[Grammar] = None,
                    rng: Optional[np.random.Generator] = None) -> DatasetBundle:
    """
    Samples every symbol-rewriting split with lengths uniform over its range.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if grammar is None:
        grammar = generate_grammar(rng)
    splits = OrderedDict()
    for name, (low, high, repeats) in SymbolRewritingSpec.LENGTHS.items():
        splits[name] = [
            sample_sr_example(grammar, int(rng.integers(low, high + 1)), repeats, rng)
            for _ in range(spec.size(name))
        ]
    echo = spec.to_dict()
    echo["splits"] = list(splits)
    echo["grammar"] = grammar.to_dict()
    return DatasetBundle("sr", splits, Vocabulary(grammar.symbols),
                         target_vocabulary(sorted(grammar.output_tokens())), echo)


# ---------------------------------------------------------------------------------------------- files


def example_line(example: Example) -> str:
    fields = [" ".join(example.source), " ".join(example.target)]
    if example.ag_target:
        fields.append(" ".join(str(i) for i in example.ag_target))
    return "\t".join(fields)


def write_tsv(bundle: DatasetBundle, directory: str):
    """
    Writes <split>.tsv for every split plus vocab.tsv and spec.json.
    """
    os.makedirs(directory, exist_ok=True)
    for name, examples in bundle.splits.items():
        with open(os.path.join(directory, f"{name}.tsv"), "w", encoding="utf-8", newline="\n") as split_file:
            split_file.writelines(example_line(example) + "\n" for example in examples)
    with open(os.path.join(directory, VOCAB_FILE), "w", encoding="utf-8", newline="\n") as vocab_file:
        for side, vocab in (("source", bundle.source_vocab), ("target", bundle.target_vocab)):
            vocab_file.writelines(f"{side}\t{token}\n" for token in vocab.regular_tokens())
    with open(os.path.join(directory, SPEC_FILE), "w", encoding="utf-8", newline="\n") as spec_file:
        spec_file.write(json.dumps(bundle.spec, sort_keys=True, indent=2) + "\n")


def _parse_line(line: str, where: str, source_vocab: Vocabulary, target_vocab: Vocabulary) -> Example:
    fields = line.split("\t")
    if len(fields) not in (2, 3):
        raise DataError(f"{where}: expected 2 or 3 tab-separated fields, got {len(fields)}")
    source = tuple(fields[0].split())
    target = tuple(fields[1].split())
    if not source or not target:
        raise DataError(f"{where}: empty source or target")
    for tokens, vocab in ((source, source_vocab), (target, target_vocab)):
        for token in tokens:
            if token not in vocab or token in vocab.specials:
                raise DataError(f"{where}: token {token!r} is not in the vocabulary")
    ag_target = ()
    if len(fields) == 3 and fields[2].strip():
        try:
            ag_target = tuple(int(i) for i in fields[2].split())
        except ValueError:
            raise DataError(f"{where}: AG column must hold integers") from None
        if len(ag_target) != len(target):
            raise DataError(f"{where}: {len(ag_target)} AG indices for {len(target)} target tokens")
        if any(not 0 <= i < len(source) for i in ag_target):
            raise DataError(f"{where}: AG index outside the source")
    return Example(source, target, ag_target)


def read_tsv(directory: str) -> DatasetBundle:
    """
    Reads a directory written by write_tsv.
    """
    spec_path = os.path.join(directory, SPEC_FILE)
    try:
        with open(spec_path, encoding="utf-8") as spec_file:
            spec = json.load(spec_file)
    except json.JSONDecodeError as err:
        raise DataError(f"{spec_path}: {err}") from err
    task = spec.get("task") if isinstance(spec, dict) else None
    if task not in ("lookup", "sr"):
        raise DataError(f"{spec_path}: unknown task {task!r}")
    validate_document(spec, ConfigSchemas.LOOKUP_SPEC if task == "lookup" else ConfigSchemas.SR_SPEC)

    tokens = {"source": [], "target": []}
    vocab_path = os.path.join(directory, VOCAB_FILE)
    with open(vocab_path, encoding="utf-8") as vocab_file:
        for number, line in enumerate(vocab_file, start=1):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 2 or fields[0] not in tokens:
                raise DataError(f"{vocab_path}:{number}: expected 'source|target<TAB>token'")
            tokens[fields[0]].append(fields[1])
    source_vocab = Vocabulary(tokens["source"])
    target_vocab = target_vocabulary(tokens["target"])

    splits = OrderedDict()
    for name in spec.get("splits", []):
        path = os.path.join(directory, f"{name}.tsv")
        with open(path, encoding="utf-8") as split_file:
            splits[name] = [
                _parse_line(line.rstrip("\n"), f"{path}:{number}", source_vocab, target_vocab)
                for number, line in enumerate(split_file, start=1)
            ]
    return DatasetBundle(task, splits, source_vocab, target_vocab, spec)


def dataset_stats(bundle: DatasetBundle) -> "OrderedDict[str, OrderedDict]":
    """
    Histogram per split: table composition for lookup, input length for symbol rewriting.
    """
    stats = OrderedDict()
    for name, examples in bundle.splits.items():
        counts = {}
        for example in examples:
            key = " ".join(example.source[1:]) if bundle.task == "lookup" else len(example.source)
            counts[key] = counts.get(key, 0) + 1
        stats[name] = OrderedDict(sorted(counts.items()))
    return stats


STATS_HEADER = "split,key,count"


def format_stats(stats: "OrderedDict[str, OrderedDict]") -> str:
    """
    One CSV for all splits: a split,key,count row per histogram bucket.
    """
    lines = [STATS_HEADER]
    for name, counts in stats.items():
        lines.extend(f"{name},{key},{count}" for key, count in counts.items())
    return "\n".join(lines) + "\n"
