"""Nexus data files, Newick trees, and the run output file set."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .likelihood import ABSENT, MISSING, PRESENT
from .trees import CladeConstraint, Tree, TreeError


class NexusError(Exception):
    pass


@dataclass
class TraitMatrix:
    """L x N presence/absence/missing matrix with row labels."""

    taxa_names: list
    cells: np.ndarray
    trait_labels: list | None = None

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int8)
        if self.cells.ndim != 2 or self.cells.shape[0] != len(self.taxa_names):
            raise NexusError("matrix shape does not match the taxa list")
        if len(set(self.taxa_names)) != len(self.taxa_names):
            raise NexusError("duplicate taxon name")
        for n in self.taxa_names:
            if re.search(r"\s", n):
                raise NexusError(f"taxon name {n!r} contains whitespace")
        if self.trait_labels is not None and len(self.trait_labels) != self.cells.shape[1]:
            raise NexusError("trait label count does not match nchar")

    @property
    def n_taxa(self) -> int:
        return self.cells.shape[0]

    @property
    def n_traits(self) -> int:
        return self.cells.shape[1]


@dataclass
class ParsedNexus:
    matrix: TraitMatrix
    clades: list = field(default_factory=list)
    embedded_tree: Tree | None = None
    synthesize_params: dict | None = None

    @property
    def is_synthetic(self) -> bool:
        return self.embedded_tree is not None or self.synthesize_params is not None


_BLOCK_RE = re.compile(r"\bBEGIN\s+(\w+)\s*;(.*?)\bEND\s*;", re.IGNORECASE | re.DOTALL)


def parse_nexus(text: str) -> ParsedNexus:
    """Parse a data file: Data block (required), Clades/trees/synthesize optional."""
    if not text.lstrip().upper().startswith("#NEXUS"):
        raise NexusError("file does not begin with #NEXUS")
    blocks = {}
    for m in _BLOCK_RE.finditer(text):
        blocks.setdefault(m.group(1).lower(), []).append(m.group(2))
    if "data" not in blocks:
        raise NexusError("no Data block found")
    matrix = _parse_data_block(blocks["data"][0])
    clades = []
    if "clades" in blocks:
        clades = _parse_clades_block(blocks["clades"][0], set(matrix.taxa_names))
    tree = None
    if "trees" in blocks:
        trees = _parse_trees_block(blocks["trees"][0])
        if trees:
            tree = trees[0]
    synth = None
    if "synthesize" in blocks:
        synth = _parse_synthesize_block(blocks["synthesize"][0])
    return ParsedNexus(matrix=matrix, clades=clades, embedded_tree=tree,
                       synthesize_params=synth)


def _split_commands(block: str):
    return [c.strip() for c in block.split(";") if c.strip()]


def _parse_data_block(block: str) -> TraitMatrix:
    ntax = nchar = None
    missing_char, gap_char = "?", "-"
    matrix_text = None
    charlabels = None
    for cmd in _split_commands(block):
        head = cmd.split(None, 1)[0].lower()
        if head == "dimensions":
            m = re.search(r"ntax\s*=\s*(\d+)", cmd, re.IGNORECASE)
            n = re.search(r"nchar\s*=\s*(\d+)", cmd, re.IGNORECASE)
            if not m or not n:
                raise NexusError("Dimensions must define ntax and nchar")
            ntax, nchar = int(m.group(1)), int(n.group(1))
        elif head == "format":
            m = re.search(r"missing\s*=\s*(\S)", cmd, re.IGNORECASE)
            if m:
                missing_char = m.group(1)
            g = re.search(r"gap\s*=\s*(\S)", cmd, re.IGNORECASE)
            if g:
                gap_char = g.group(1)
        elif head == "matrix":
            matrix_text = cmd.split(None, 1)[1] if len(cmd.split(None, 1)) > 1 else ""
        elif head == "charlabels":
            charlabels = cmd.split()[1:]
        # anything else in the Data block is ignored
    if ntax is None:
        raise NexusError("Data block lacks a Dimensions command")
    if matrix_text is None:
        raise NexusError("Data block lacks a Matrix command")

    code = {"0": ABSENT, "1": PRESENT, missing_char: MISSING, gap_char: MISSING}
    rows: dict[str, str] = {}
    order: list[str] = []
    section: set[str] = set()
    for raw in matrix_text.splitlines():
        line = raw.strip()
        if not line:
            section = set()
            continue
        if line.startswith("[") and line.endswith("]"):
            continue  # whole-line comment between interleaved sections
        if "[" in line or "]" in line:
            raise NexusError(f"comment embedded in a matrix row: {raw!r}")
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise NexusError(f"unlabelled or empty matrix row: {raw!r}")
        name, symbols = parts
        symbols = "".join(symbols.split())
        if name in section:
            raise NexusError(f"duplicate taxon name {name!r}")
        section.add(name)
        if name not in rows:
            rows[name] = ""
            order.append(name)
        rows[name] += symbols

    if ntax != len(order):
        raise NexusError(f"declared ntax={ntax} but matrix has {len(order)} taxa")
    cells = np.empty((ntax, nchar), dtype=np.int8)
    for i, name in enumerate(order):
        s = rows[name]
        if len(s) != nchar:
            raise NexusError(f"taxon {name!r} has {len(s)} characters, expected {nchar}")
        for j, ch in enumerate(s):
            if ch not in code:
                raise NexusError(f"illegal matrix symbol {ch!r} for taxon {name!r}")
            cells[i, j] = code[ch]
    if charlabels is not None and len(charlabels) != nchar:
        raise NexusError(f"Charlabels lists {len(charlabels)} names, expected {nchar}")
    return TraitMatrix(taxa_names=order, cells=cells, trait_labels=charlabels)


_CLADE_KEY_RE = re.compile(
    r"\b(name|taxa|rootmin|rootmax|originatemin|originatemax)\s*=", re.IGNORECASE)


def _parse_clades_block(block: str, known_taxa: set) -> list:
    clades = []
    for cmd in _split_commands(block):
        if not cmd.split(None, 1)[0].lower().startswith("clade"):
            continue
        body = cmd.split(None, 1)[1] if len(cmd.split(None, 1)) > 1 else ""
        fields = {}
        keys = list(_CLADE_KEY_RE.finditer(body))
        for i, m in enumerate(keys):
            end = keys[i + 1].start() if i + 1 < len(keys) else len(body)
            fields[m.group(1).lower()] = body[m.end():end].strip()
        if "name" not in fields or "taxa" not in fields:
            raise NexusError(f"clade command lacks a name or taxa: {cmd!r}")
        taxa = [t for t in re.split(r"[\s,]+", fields["taxa"]) if t]
        unknown = set(taxa) - known_taxa
        if unknown:
            raise NexusError(f"clade {fields['name']!r} references unknown taxa "
                             f"{sorted(unknown)}")

        def num(key):
            return float(fields[key]) if key in fields else None

        clades.append(CladeConstraint(
            name=fields["name"].split()[0],
            taxa=frozenset(taxa),
            rootmin=num("rootmin"), rootmax=num("rootmax"),
            originatemin=num("originatemin"), originatemax=num("originatemax")))
    return clades


def _parse_trees_block(block: str) -> list:
    trees = []
    for cmd in _split_commands(block):
        head = cmd.split(None, 1)[0].lower()
        if head != "tree":
            continue
        eq = cmd.index("=")
        newick = cmd[eq + 1:].strip()
        newick = re.sub(r"^\[&R\]\s*", "", newick, flags=re.IGNORECASE)
        trees.append(parse_newick(newick + ";"))
    return trees


def _parse_synthesize_block(block: str) -> dict:
    out = {}
    for cmd in _split_commands(block):
        if "=" in cmd:
            k, v = cmd.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# -- Newick ---------------------------------------------------------------

_CAT_COMMENT_RE = re.compile(r"\[&k=(\d+)\]")


def parse_newick(text: str, leaf_order=None) -> Tree:
    """Parse a rooted binary Newick string with branch lengths.

    Optional ``[&k=N]`` comments after branch lengths set catastrophe counts
    (positions are evenly spaced placeholders for the caller to resample).
    With ``leaf_order`` the leaf ids 1..L follow that name order instead of
    encounter order.
    """
    s = text.strip()
    if not s.endswith(";"):
        raise NexusError("Newick string must end with ';'")
    s = s[:-1].strip()
    pos = 0

    def error(msg):
        raise NexusError(f"{msg} at offset {pos} in Newick string")

    nodes = []  # (children indices | name, branch length, cat count)

    def parse_clade():
        nonlocal pos
        children = None
        name = None
        if pos < len(s) and s[pos] == "(":
            pos += 1
            children = [parse_clade()]
            while pos < len(s) and s[pos] == ",":
                pos += 1
                children.append(parse_clade())
            if pos >= len(s) or s[pos] != ")":
                error("unbalanced parentheses")
            pos += 1
            if len(children) != 2:
                raise NexusError(
                    f"non-binary node with {len(children)} children; trees must be binary")
        m = re.match(r"[^\s(),:;\[\]]+", s[pos:])
        if m:
            name = m.group(0)
            pos += m.end()
        if children is None and name is None:
            error("expected a leaf name")
        length = None
        if pos < len(s) and s[pos] == ":":
            pos += 1
            m = re.match(r"[-+0-9.eE]+", s[pos:])
            if not m:
                error("expected a branch length")
            length = float(m.group(0))
            pos += m.end()
        k = 0
        m = _CAT_COMMENT_RE.match(s[pos:])
        if m:
            k = int(m.group(1))
            pos += m.end()
        nodes.append((children, name, length, k))
        return len(nodes) - 1

    root_idx = parse_clade()
    if pos != len(s):
        error("trailing characters")

    # Depths from the root, then ages anchored so the youngest leaf sits at 0.
    depth = {root_idx: 0.0}
    order = [root_idx]
    parent_of = {}
    while order:
        i = order.pop()
        ch = nodes[i][0]
        if ch:
            for c in ch:
                ln = nodes[c][2]
                if ln is None:
                    raise NexusError("missing branch length")
                depth[c] = depth[i] + ln
                parent_of[c] = i
                order.append(c)
    leaf_idxs = [i for i in depth if nodes[i][0] is None]
    names = [nodes[i][1] for i in leaf_idxs]
    if len(set(names)) != len(names):
        raise NexusError("duplicate leaf name in tree")
    max_depth = max(depth[i] for i in leaf_idxs)
    if leaf_order is not None:
        want = list(leaf_order)
        if sorted(want) != sorted(names):
            raise NexusError("tree leaves do not match the requested leaf order")
        rank = {n: i for i, n in enumerate(want)}
        leaf_idxs.sort(key=lambda i: rank[nodes[i][1]])
    L = len(leaf_idxs)
    ids = {}
    for n, i in enumerate(leaf_idxs):
        ids[i] = n + 1
    nxt = L + 1
    for i in depth:
        if i not in ids:
            ids[i] = nxt
            nxt += 1

    parent, children, age, cats, leaf_names = {}, {}, {}, {}, {}
    for i, d in depth.items():
        v = ids[i]
        age[v] = max_depth - d
        ch, name, _, k = nodes[i]
        if ch is None:
            leaf_names[v] = name
        else:
            children[v] = [ids[c] for c in ch]
        if i in parent_of:
            parent[v] = ids[parent_of[i]]
            cats[v] = [(j + 1.0) / (k + 1.0) for j in range(k)]
    return Tree(parent, children, age, leaf_names, ids[root_idx], cats)


def write_newick(tree: Tree, with_cats: bool = False, fmt: str = ".12g") -> str:
    """Serialize a tree; ``with_cats`` appends [&k=N] per-branch count comments."""

    def render(v):
        if tree.is_leaf(v):
            body = tree.leaf_names[v]
        else:
            a, b = tree.children[v]
            body = f"({render(a)},{render(b)})"
        if v == tree.root:
            return body
        ln = tree.age[tree.parent[v]] - tree.age[v]
        out = f"{body}:{ln:{fmt}}"
        if with_cats:
            out += f"[&k={len(tree.cats.get(v, ()))}]"
        return out

    return render(tree.root) + ";"


# -- writers ---------------------------------------------------------------

def format_matrix_rows(matrix: TraitMatrix) -> list:
    sym = {ABSENT: "0", PRESENT: "1", MISSING: "?"}
    width = max(len(n) for n in matrix.taxa_names) + 2
    return [f"{name:<{width}}" + "".join(sym[int(c)] for c in matrix.cells[i])
            for i, name in enumerate(matrix.taxa_names)]


def write_data_nexus(matrix: TraitMatrix, clades=(), tree: Tree | None = None,
                     synthesize_params: dict | None = None) -> str:
    """Assemble a data file: Data block plus optional Clades/trees/synthesize."""
    out = ["#NEXUS", "", "BEGIN DATA;", "",
           f"DIMENSIONS NTAX={matrix.n_taxa} NCHAR={matrix.n_traits};",
           "FORMAT MISSING=? GAP=-;", ""]
    if matrix.trait_labels:
        out.append("CHARLABELS " + " ".join(matrix.trait_labels) + ";")
        out.append("")
    out.append("MATRIX")
    out.append("")
    out.extend(format_matrix_rows(matrix))
    out.extend([";", "END;", ""])
    if clades:
        out.append("BEGIN CLADES;")
        out.append("")
        for c in clades:
            out.append(f"CLADE NAME = {c.name}")
            for key, val in (("ROOTMIN", c.rootmin), ("ROOTMAX", c.rootmax),
                             ("ORIGINATEMIN", c.originatemin),
                             ("ORIGINATEMAX", c.originatemax)):
                if val is not None:
                    out.append(f"{key} = {val:.12g}")
            out.append("TAXA = " + ", ".join(sorted(c.taxa)) + ";")
            out.append("")
        out.extend(["END;", ""])
    if tree is not None:
        out.extend(["BEGIN TREES;",
                    f"TREE true_tree = {write_newick(tree, with_cats=True)}",
                    "END;", ""])
    if synthesize_params is not None:
        out.append("BEGIN SYNTHESIZE;")
        for k, v in synthesize_params.items():
            out.append(f"{k} = {v};")
        out.extend(["END;", ""])
    return "\n".join(out) + "\n"


@dataclass
class TraceRecord:
    """One sampled row of the run output."""

    sample: int
    root_age: float
    mu: float
    kappa: float
    lam: float
    rho: float
    log_prior: float
    log_likelihood: float
    poisson_log_likelihood: float


TRACE_COLUMNS = ("sample", "root_time", "mu", "kappa", "lambda", "rho",
                 "log_prior", "log_likelihood", "poisson_log_likelihood")


def _fmt(x) -> str:
    if isinstance(x, int):
        return str(x)
    return format(float(x), ".12g")


class OutputSet:
    """Streaming writers for one run's output files.

    Creates <stem>.txt, <stem>.nex, <stem>cat.nex, <stem>.par and, when
    missing data is modelled, <stem>XI.txt.  Coupled runs insert _x/_y before
    the optional replicate suffix.
    """

    def __init__(self, stem: str, taxa_names, par_text: str,
                 with_xi: bool = False, chain: str = "", suffix: str = ""):
        base = f"{stem}{chain}{suffix}"
        self.base = base
        self.paths = {
            "trace": f"{base}.txt",
            "trees": f"{base}.nex",
            "cats": f"{base}cat.nex",
            "par": f"{base}.par",
        }
        self._trace = open(self.paths["trace"], "w")
        self._trace.write("\t".join(TRACE_COLUMNS) + "\n")
        self._trees = open(self.paths["trees"], "w")
        self._cats = open(self.paths["cats"], "w")
        for f in (self._trees, self._cats):
            f.write("#NEXUS\n\nBEGIN TREES;\n")
        self._xi = None
        if with_xi:
            self.paths["xi"] = f"{base}XI.txt"
            self._xi = open(self.paths["xi"], "w")
            self._xi.write("sample\t" + "\t".join(taxa_names) + "\n")
        with open(self.paths["par"], "w") as f:
            f.write(par_text)

    def write_sample(self, rec: TraceRecord, tree: Tree, xi=None):
        row = [rec.sample, rec.root_age, rec.mu, rec.kappa, rec.lam, rec.rho,
               rec.log_prior, rec.log_likelihood, rec.poisson_log_likelihood]
        self._trace.write("\t".join(_fmt(x) for x in row) + "\n")
        self._trees.write(f"TREE STATE_{rec.sample} = {write_newick(tree)}\n")
        self._cats.write(
            f"TREE STATE_{rec.sample} = {write_newick(tree, with_cats=True)}\n")
        if self._xi is not None:
            self._xi.write(str(rec.sample) + "\t"
                           + "\t".join(_fmt(x) for x in xi) + "\n")

    def write_tau(self, tau_over_j: int):
        self.paths["tau"] = f"{self.base}.tau"
        with open(self.paths["tau"], "w") as f:
            f.write(f"{tau_over_j}\n")

    def close(self):
        for f in (self._trees, self._cats):
            f.write("END;\n")
        self._trace.close()
        self._trees.close()
        self._cats.close()
        if self._xi is not None:
            self._xi.close()


def read_tree_samples(nex_path: str, cat_path: str | None = None) -> list:
    """Read sampled trees from an output file, attaching catastrophe counts.

    When ``cat_path`` is given, counts are read from its [&k=N] annotations;
    positions are placeholders.
    """
    with open(nex_path) as f:
        text = f.read()
    m = _BLOCK_RE.search(text)
    if not m or m.group(1).lower() != "trees":
        raise NexusError(f"no trees block in {nex_path}")
    trees = _parse_trees_block(m.group(2))
    if cat_path is not None:
        with open(cat_path) as f:
            ctext = f.read()
        cm = _BLOCK_RE.search(ctext)
        ctrees = _parse_trees_block(cm.group(2)) if cm else []
        if len(ctrees) == len(trees):
            trees = ctrees
    return trees


def read_trace(path: str) -> dict:
    """Read a trace file into {column: numpy array}."""
    with open(path) as f:
        header = f.readline().split()
        rows = [line.split() for line in f if line.strip()]
    cols = {name: np.array([float(r[i]) for r in rows]) for i, name in enumerate(header)}
    return cols
