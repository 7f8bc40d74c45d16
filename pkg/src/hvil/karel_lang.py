"""Lexer, parser, and interpreter for the Karel subset.

Programs look like `def run() { turnRight(); while (noMarkersPresent()) {
... } }`: five primitive actions, `if`/`ifElse`/`while` over four predicates
and their negated surface forms. The interpreter turns a program plus an
initial world into an observation-action trace and a coverage report of
which statements and branch arms executed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .envs import EnvCrash
from .karel_world import KAREL_ACTION_NAMES, KarelWorld
from .trace import TERMINATE, Trace

PREDICATES = ("frontIsClear", "leftIsClear", "rightIsClear", "markersPresent")

NEGATED_SURFACE = {
    "frontIsClear": "notFrontIsClear",
    "leftIsClear": "notLeftIsClear",
    "rightIsClear": "notRightIsClear",
    "markersPresent": "noMarkersPresent",
}
SURFACE_TO_COND = {name: (name, False) for name in PREDICATES}
SURFACE_TO_COND.update({neg: (pos, True) for pos, neg in NEGATED_SURFACE.items()})

KEYWORDS = ("def", "run", "if", "else", "while")
PUNCT = "(){};"

ACTION_IDS = {name: i for i, name in enumerate(KAREL_ACTION_NAMES)}


class KarelSyntaxError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {message}")
        self.line = line
        self.col = col


class BudgetExceededError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Cond:
    predicate: str
    negated: bool

    def surface(self) -> str:
        return NEGATED_SURFACE[self.predicate] if self.negated else self.predicate


@dataclass(frozen=True)
class Action:
    name: str


@dataclass(frozen=True)
class If:
    cond: Cond
    body: tuple


@dataclass(frozen=True)
class IfElse:
    cond: Cond
    then_body: tuple
    else_body: tuple


@dataclass(frozen=True)
class While:
    cond: Cond
    body: tuple


@dataclass(frozen=True)
class Program:
    body: tuple


# ---------------------------------------------------------------------------
# lexer


@dataclass(frozen=True)
class Token:
    kind: str  # kw | ident | punct | eof
    value: str
    line: int
    col: int


def tokenize(source: str) -> list[Token]:
    tokens = []
    line, col = 1, 1
    i = 0
    while i < len(source):
        ch = source[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch.isspace():
            col += 1
            i += 1
            continue
        if ch in PUNCT:
            tokens.append(Token("punct", ch, line, col))
            col += 1
            i += 1
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < len(source) and (source[j].isalnum() or source[j] == "_"):
                j += 1
            word = source[i:j]
            kind = "kw" if word in KEYWORDS else "ident"
            tokens.append(Token(kind, word, line, col))
            col += j - i
            i = j
            continue
        raise KarelSyntaxError(f"illegal character {ch!r}", line, col)
    tokens.append(Token("eof", "", line, col))
    return tokens


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def fail(self, expected: str):
        tok = self.peek()
        got = tok.value if tok.kind != "eof" else "end of input"
        raise KarelSyntaxError(f"expected {expected}, got {got!r}", tok.line, tok.col)

    def expect(self, value: str) -> Token:
        tok = self.peek()
        if tok.value != value or tok.kind == "eof":
            self.fail(repr(value))
        return self.advance()

    def parse_program(self) -> Program:
        self.expect("def")
        self.expect("run")
        self.expect("(")
        self.expect(")")
        body = self.parse_block()
        if self.peek().kind != "eof":
            self.fail("end of input")
        return Program(body)

    def parse_block(self) -> tuple:
        self.expect("{")
        stmts = []
        while self.peek().value != "}":
            if self.peek().kind == "eof":
                self.fail("'}'")
            stmts.append(self.parse_statement())
        self.expect("}")
        return tuple(stmts)

    def parse_statement(self):
        tok = self.peek()
        if tok.value == "while":
            self.advance()
            self.expect("(")
            cond = self.parse_cond()
            self.expect(")")
            return While(cond, self.parse_block())
        if tok.value == "if":
            self.advance()
            self.expect("(")
            cond = self.parse_cond()
            self.expect(")")
            then_body = self.parse_block()
            if self.peek().value == "else":
                self.advance()
                return IfElse(cond, then_body, self.parse_block())
            return If(cond, then_body)
        if tok.kind == "ident" and tok.value in ACTION_IDS:
            self.advance()
            self.expect("(")
            self.expect(")")
            self.expect(";")
            return Action(tok.value)
        self.fail("a statement (action, 'if', or 'while')")

    def parse_cond(self) -> Cond:
        tok = self.peek()
        if tok.kind == "ident" and tok.value in SURFACE_TO_COND:
            self.advance()
            self.expect("(")
            self.expect(")")
            predicate, negated = SURFACE_TO_COND[tok.value]
            return Cond(predicate, negated)
        self.fail("a predicate")


def parse(source_or_tokens) -> Program:
    if isinstance(source_or_tokens, str):
        tokens = tokenize(source_or_tokens)
    else:
        tokens = source_or_tokens
    return _Parser(tokens).parse_program()


def pretty(program: Program) -> str:
    """Canonical single-line rendering; parse(pretty(ast)) == ast."""

    def fmt_body(body: tuple) -> str:
        if not body:
            return "{ }"
        return "{ " + " ".join(fmt_stmt(s) for s in body) + " }"

    def fmt_stmt(stmt) -> str:
        if isinstance(stmt, Action):
            return f"{stmt.name}();"
        if isinstance(stmt, While):
            return f"while ({stmt.cond.surface()}()) {fmt_body(stmt.body)}"
        if isinstance(stmt, If):
            return f"if ({stmt.cond.surface()}()) {fmt_body(stmt.body)}"
        if isinstance(stmt, IfElse):
            return (
                f"if ({stmt.cond.surface()}()) {fmt_body(stmt.then_body)}"
                f" else {fmt_body(stmt.else_body)}"
            )
        raise TypeError(f"unknown statement {stmt!r}")

    return f"def run() {fmt_body(program.body)}"


# ---------------------------------------------------------------------------
# interpreter + coverage


def index_statements(program: Program) -> list:
    """Preorder list of statement nodes; positions are the coverage indices."""
    out = []

    def walk(body: tuple):
        for stmt in body:
            out.append(stmt)
            if isinstance(stmt, While) or isinstance(stmt, If):
                walk(stmt.body)
            elif isinstance(stmt, IfElse):
                walk(stmt.then_body)
                walk(stmt.else_body)

    walk(program.body)
    return out


@dataclass
class CoverageReport:
    stmt_hits: list[int]
    branch_hits: dict[int, list[int]] = field(default_factory=dict)  # idx -> [true arm, false arm]

    def update(self, other: "CoverageReport"):
        for i, h in enumerate(other.stmt_hits):
            self.stmt_hits[i] += h
        for i, (a, b) in other.branch_hits.items():
            mine = self.branch_hits.setdefault(i, [0, 0])
            mine[0] += a
            mine[1] += b


def empty_coverage(program: Program) -> CoverageReport:
    stmts = index_statements(program)
    report = CoverageReport(stmt_hits=[0] * len(stmts))
    for i, stmt in enumerate(stmts):
        if isinstance(stmt, (If, IfElse, While)):
            report.branch_hits[i] = [0, 0]
    return report


def interpret(
    program: Program, world: KarelWorld, step_budget: int = 10_000
) -> tuple[Trace, CoverageReport]:
    """Execute structurally against a copy of the world.

    Records the 4-bit observation before every primitive action; when the run
    body completes, the final observation and the termination action close
    the trace. Crash exceptions propagate; the budget (counted over actions
    and condition tests, so even action-free loops trip it) raises
    BudgetExceededError.
    """
    w = world.copy()
    stmts = index_statements(program)
    idx = {id(s): i for i, s in enumerate(stmts)}
    report = empty_coverage(program)
    observations = []
    actions: list[int] = []
    ticks = 0

    def tick():
        nonlocal ticks
        ticks += 1
        if ticks > step_budget:
            raise BudgetExceededError(f"exceeded {step_budget} interpreter steps")

    def eval_cond(cond: Cond) -> bool:
        tick()
        value = {
            "frontIsClear": w.front_is_clear,
            "leftIsClear": w.left_is_clear,
            "rightIsClear": w.right_is_clear,
            "markersPresent": w.markers_present,
        }[cond.predicate]()
        return not value if cond.negated else value

    def run_body(body: tuple):
        for stmt in body:
            i = idx[id(stmt)]
            report.stmt_hits[i] += 1
            if isinstance(stmt, Action):
                tick()
                observations.append(w.observe())
                actions.append(ACTION_IDS[stmt.name])
                w.step(ACTION_IDS[stmt.name])
            elif isinstance(stmt, If):
                if eval_cond(stmt.cond):
                    report.branch_hits[i][0] += 1
                    run_body(stmt.body)
                else:
                    report.branch_hits[i][1] += 1
            elif isinstance(stmt, IfElse):
                if eval_cond(stmt.cond):
                    report.branch_hits[i][0] += 1
                    run_body(stmt.then_body)
                else:
                    report.branch_hits[i][1] += 1
                    run_body(stmt.else_body)
            elif isinstance(stmt, While):
                while True:
                    if eval_cond(stmt.cond):
                        report.branch_hits[i][0] += 1
                        run_body(stmt.body)
                    else:
                        report.branch_hits[i][1] += 1
                        break

    run_body(program.body)
    observations.append(w.observe())
    actions.append(TERMINATE)
    return Trace(observations, actions).validate(), report


def coverage_accept(report: CoverageReport, program: Program) -> bool:
    """Every statement executed and every branch arm taken at least once."""
    if any(h < 1 for h in report.stmt_hits):
        return False
    return all(a >= 1 and b >= 1 for a, b in report.branch_hits.values())


# ---------------------------------------------------------------------------
# the six stock programs (loop-containing Hour-of-Code tasks, A through F)

PROGRAM_SOURCES = {
    "A": "def run() { turnRight(); while (noMarkersPresent()) { move(); "
    "if (rightIsClear()) { turnRight(); } } }",
    "B": "def run() { turnRight(); while (noMarkersPresent()) { move(); "
    "if (leftIsClear()) { turnLeft(); } } }",
    "C": "def run() { turnRight(); while (noMarkersPresent()) { "
    "if (rightIsClear()) { turnRight(); } move(); } }",
    "D": "def run() { turnRight(); while (noMarkersPresent()) { "
    "if (frontIsClear()) { move(); } else { turnLeft(); } } }",
    "E": "def run() { turnRight(); while (noMarkersPresent()) { "
    "if (frontIsClear()) { move(); } else { turnRight(); } } }",
    "F": "def run() { turnRight(); while (noMarkersPresent()) { "
    "if (frontIsClear()) { move(); } else { "
    "if (rightIsClear()) { turnRight(); } else { turnLeft(); } } } }",
}


def stock_program(name: str) -> Program:
    return parse(PROGRAM_SOURCES[name])


def random_program(rng, max_depth: int = 3, max_stmts: int = 4) -> Program:
    """Random well-formed AST; fresh node instances throughout."""

    def rand_cond() -> Cond:
        return Cond(PREDICATES[rng.integers(len(PREDICATES))], bool(rng.integers(2)))

    def rand_body(depth: int) -> tuple:
        n = int(rng.integers(1, max_stmts + 1))
        return tuple(rand_stmt(depth) for _ in range(n))

    def rand_stmt(depth: int):
        kinds = ["action"] if depth >= max_depth else ["action", "action", "if", "ifelse", "while"]
        kind = kinds[rng.integers(len(kinds))]
        if kind == "action":
            return Action(KAREL_ACTION_NAMES[rng.integers(len(KAREL_ACTION_NAMES))])
        if kind == "if":
            return If(rand_cond(), rand_body(depth + 1))
        if kind == "ifelse":
            return IfElse(rand_cond(), rand_body(depth + 1), rand_body(depth + 1))
        return While(rand_cond(), rand_body(depth + 1))

    return Program(rand_body(1))
