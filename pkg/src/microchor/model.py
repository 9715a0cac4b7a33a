"""Domain model for choreography packages and referential-integrity validation.

The model covers the package pieces a constrained device interpreter needs:
information/role/relationship/channel declarations, the ``cloneType``
replacement-device extension, and choreography activity trees built from
sequence, parallel, guarded workunit, interaction, and perform nodes.

All types are immutable after construction and therefore safe to share
across concurrent readers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class CloneUsage(enum.Enum):
    """How a replacement device may be substituted for a disappeared role."""

    ON_DEMAND = "on-demand"
    PERMANENT = "permanent"


class ExchangeAction(enum.Enum):
    REQUEST = "request"
    RESPOND = "respond"


class Severity(enum.Enum):
    ERROR = "error"
    WARN = "warn"


@dataclass(frozen=True)
class Diagnostic:
    """One validation finding: a stable code, the offending element path, a message."""

    code: str
    path: str
    message: str
    severity: Severity = Severity.ERROR

    def __str__(self) -> str:
        return f"{self.severity.value.upper()} {self.code} at {self.path}: {self.message}"


@dataclass(frozen=True)
class InformationType:
    name: str


@dataclass(frozen=True)
class RoleType:
    name: str


@dataclass(frozen=True)
class RelationshipType:
    """A declared pairing of two roles permitted to interact."""

    name: str
    role_a: str
    role_b: str

    def pair(self) -> frozenset[str]:
        return frozenset((self.role_a, self.role_b))


@dataclass(frozen=True)
class ChannelType:
    """A typed conduit naming the role that interactions through it target."""

    name: str
    target_role: str


@dataclass(frozen=True)
class CloneType:
    """Replacement-device declaration.

    ``endpoint`` is deployment information: choreography documents do not
    carry addresses, so it is normally filled in from scenario configuration.
    """

    name: str
    role_refs: tuple[str, ...]
    usage: CloneUsage = CloneUsage.PERMANENT
    interface: str | None = None
    endpoint: str | None = None


@dataclass(frozen=True)
class VariableDefinition:
    """A choreography variable backed by either an information type or a channel type."""

    name: str
    information_type: str | None = None
    channel_type: str | None = None
    mutable: bool = True

    @property
    def is_channel(self) -> bool:
        return self.channel_type is not None


@dataclass(frozen=True)
class GetVariable:
    variable: str
    role: str


@dataclass(frozen=True)
class IsVariableAvailable:
    variable: str
    role: str


CdlExpression = GetVariable | IsVariableAvailable


@dataclass(frozen=True)
class Exchange:
    """The send/receive variable binding inside an interaction."""

    action: ExchangeAction
    name: str
    information_type: str
    send_expr: GetVariable
    receive_expr: GetVariable


@dataclass(frozen=True)
class Duration:
    """A non-negative span of whole seconds, rendered as a PnDTnHnMnS subset."""

    seconds: int

    def __post_init__(self) -> None:
        if self.seconds < 0:
            raise ValueError("duration must be non-negative")

    def to_iso(self) -> str:
        if self.seconds == 0:
            return "PT0S"
        rest = self.seconds
        days, rest = divmod(rest, 86400)
        hours, rest = divmod(rest, 3600)
        minutes, secs = divmod(rest, 60)
        out = "P"
        if days:
            out += f"{days}D"
        if hours or minutes or secs:
            out += "T"
            if hours:
                out += f"{hours}H"
            if minutes:
                out += f"{minutes}M"
            if secs:
                out += f"{secs}S"
        return out


@dataclass(frozen=True)
class Interaction:
    """One global message exchange between a from-role and a to-role."""

    name: str
    operation: str
    relationship: str
    from_role: str
    to_role: str
    exchanges: tuple[Exchange, ...]
    channel_variable: str | None = None
    initiate: bool = False
    timeout: Duration | None = None


@dataclass(frozen=True)
class Sequence:
    children: tuple["Activity", ...]


@dataclass(frozen=True)
class Parallel:
    children: tuple["Activity", ...]


@dataclass(frozen=True)
class WorkUnit:
    """A guarded block whose body runs only once the guard expression holds."""

    name: str
    guard: CdlExpression | None
    body: "Activity"


@dataclass(frozen=True)
class Perform:
    choreography_name: str


Activity = Sequence | Parallel | WorkUnit | Interaction | Perform


@dataclass(frozen=True)
class Choreography:
    name: str
    root: bool
    relationships: tuple[str, ...]
    variables: tuple[VariableDefinition, ...]
    body: Activity


@dataclass(frozen=True)
class ChoreographyPackage:
    """A complete parsed choreography document."""

    name: str
    information_types: tuple[InformationType, ...] = ()
    role_types: tuple[RoleType, ...] = ()
    relationship_types: tuple[RelationshipType, ...] = ()
    channel_types: tuple[ChannelType, ...] = ()
    clone_types: tuple[CloneType, ...] = ()
    choreographies: tuple[Choreography, ...] = ()

    def role_names(self) -> set[str]:
        return {r.name for r in self.role_types}

    def relationship(self, name: str) -> RelationshipType | None:
        for rel in self.relationship_types:
            if rel.name == name:
                return rel
        return None

    def choreography(self, name: str) -> Choreography | None:
        for chor in self.choreographies:
            if chor.name == name:
                return chor
        return None

    def root_choreography(self) -> Choreography | None:
        for chor in self.choreographies:
            if chor.root:
                return chor
        return None


def walk_activities(activity: Activity):
    """Yield every activity node of a tree in document order."""
    yield activity
    if isinstance(activity, (Sequence, Parallel)):
        for child in activity.children:
            yield from walk_activities(child)
    elif isinstance(activity, WorkUnit):
        yield from walk_activities(activity.body)


def iter_interactions(activity: Activity):
    """Yield the interactions of a tree in document order, without following performs."""
    for node in walk_activities(activity):
        if isinstance(node, Interaction):
            yield node


@dataclass
class _Validator:
    pkg: ChoreographyPackage
    out: list[Diagnostic] = field(default_factory=list)

    def error(self, code: str, path: str, message: str) -> None:
        self.out.append(Diagnostic(code, path, message, Severity.ERROR))

    def warn(self, code: str, path: str, message: str) -> None:
        self.out.append(Diagnostic(code, path, message, Severity.WARN))

    def run(self) -> list[Diagnostic]:
        self._check_names()
        self._check_roots()
        self._check_relationships()
        self._check_channels()
        self._check_clones()
        for chor in self.pkg.choreographies:
            self._check_choreography(chor)
        return self.out

    def _check_names(self) -> None:
        categories = [
            ("informationType", [t.name for t in self.pkg.information_types]),
            ("roleType", [t.name for t in self.pkg.role_types]),
            ("relationshipType", [t.name for t in self.pkg.relationship_types]),
            ("channelType", [t.name for t in self.pkg.channel_types]),
            ("cloneType", [t.name for t in self.pkg.clone_types]),
            ("choreography", [t.name for t in self.pkg.choreographies]),
        ]
        for category, names in categories:
            seen: set[str] = set()
            for i, name in enumerate(names):
                path = f"package/{category}[{i}]"
                if not name:
                    self.error("EMPTY_NAME", path, f"{category} with empty name")
                elif name in seen:
                    self.error("DUPLICATE_NAME", path, f"duplicate {category} name {name!r}")
                seen.add(name)

    def _check_roots(self) -> None:
        roots = [c.name for c in self.pkg.choreographies if c.root]
        if not roots:
            self.error("NO_ROOT", "package", "no choreography is marked root")
        elif len(roots) > 1:
            self.error(
                "MULTIPLE_ROOTS", "package",
                "more than one root choreography: " + ", ".join(roots),
            )

    def _check_relationships(self) -> None:
        roles = self.pkg.role_names()
        for i, rel in enumerate(self.pkg.relationship_types):
            path = f"package/relationshipType[{rel.name or i}]"
            if rel.role_a == rel.role_b:
                self.error("SELF_RELATIONSHIP", path, f"relationship pairs {rel.role_a!r} with itself")
            for role in (rel.role_a, rel.role_b):
                if role not in roles:
                    self.error("UNDECLARED_ROLE", path, f"relationship references undeclared role {role!r}")

    def _check_channels(self) -> None:
        roles = self.pkg.role_names()
        for i, chan in enumerate(self.pkg.channel_types):
            if chan.target_role not in roles:
                self.error(
                    "UNDECLARED_ROLE", f"package/channelType[{chan.name or i}]",
                    f"channel targets undeclared role {chan.target_role!r}",
                )

    def _check_clones(self) -> None:
        roles = self.pkg.role_names()
        for i, clone in enumerate(self.pkg.clone_types):
            path = f"package/cloneType[{clone.name or i}]"
            if not clone.role_refs:
                self.error("EMPTY_CLONE", path, "cloneType declares no roleType references")
            for ref in clone.role_refs:
                if ref not in roles:
                    self.error("UNDECLARED_ROLE", path, f"cloneType references undeclared role {ref!r}")

    def _check_choreography(self, chor: Choreography) -> None:
        base = f"package/choreography[{chor.name}]"
        info_types = {t.name for t in self.pkg.information_types}
        channel_types = {t.name for t in self.pkg.channel_types}
        declared_rels = {r.name for r in self.pkg.relationship_types}
        roles = self.pkg.role_names()

        for rel_name in chor.relationships:
            if rel_name not in declared_rels:
                self.error(
                    "UNDECLARED_RELATIONSHIP", f"{base}/relationship[{rel_name}]",
                    f"choreography lists undeclared relationship {rel_name!r}",
                )

        var_names = {v.name for v in chor.variables}
        for var in chor.variables:
            path = f"{base}/variable[{var.name}]"
            if var.information_type is None and var.channel_type is None:
                self.error("BAD_VARIABLE", path, "variable names neither an informationType nor a channelType")
            if var.information_type is not None and var.information_type not in info_types:
                self.error(
                    "UNDECLARED_INFORMATION_TYPE", path,
                    f"variable references undeclared informationType {var.information_type!r}",
                )
            # Channel declarations are often omitted from partial documents;
            # flag them as warnings so such packages stay loadable.
            if var.channel_type is not None and var.channel_type not in channel_types:
                self.warn(
                    "UNDECLARED_CHANNEL", path,
                    f"variable references undeclared channelType {var.channel_type!r}",
                )

        for pos, node in enumerate(walk_activities(chor.body)):
            if isinstance(node, Interaction):
                self._check_interaction(chor, node, f"{base}/interaction[{node.name}]", var_names, roles)
            elif isinstance(node, WorkUnit) and node.guard is not None:
                path = f"{base}/workunit[{node.name}]"
                if node.guard.role not in roles:
                    self.error("UNDECLARED_ROLE", path, f"guard references undeclared role {node.guard.role!r}")
                if node.guard.variable not in var_names:
                    self.error("UNBOUND_VARIABLE", path, f"guard references unknown variable {node.guard.variable!r}")
            elif isinstance(node, Perform):
                path = f"{base}/perform[{node.choreography_name}]"
                target = self.pkg.choreography(node.choreography_name)
                if target is None:
                    self.error(
                        "UNDECLARED_CHOREOGRAPHY", path,
                        f"perform targets unknown choreography {node.choreography_name!r}",
                    )
                elif target.root:
                    self.error("PERFORM_TARGETS_ROOT", path, "perform may not target the root choreography")
                elif target.name == chor.name:
                    self.error("PERFORM_SELF", path, "perform may not target its own choreography")

    def _check_interaction(
        self,
        chor: Choreography,
        inter: Interaction,
        path: str,
        var_names: set[str],
        roles: set[str],
    ) -> None:
        for role in (inter.from_role, inter.to_role):
            if role not in roles:
                self.error("UNDECLARED_ROLE", path, f"interaction names undeclared role {role!r}")

        rel = self.pkg.relationship(inter.relationship)
        if rel is None:
            self.error(
                "UNDECLARED_RELATIONSHIP", path,
                f"interaction references undeclared relationship {inter.relationship!r}",
            )
        elif {inter.from_role, inter.to_role} != rel.pair():
            self.error(
                "ROLE_PAIR_MISMATCH", path,
                f"participants ({inter.from_role}, {inter.to_role}) are not the roles of {rel.name}",
            )
        if inter.relationship not in chor.relationships:
            self.error(
                "RELATIONSHIP_NOT_LISTED", path,
                f"relationship {inter.relationship!r} is not listed by choreography {chor.name!r}",
            )

        if not inter.exchanges:
            self.error("NO_EXCHANGES", path, "interaction declares no exchanges")
        for exch in inter.exchanges:
            for label, expr in (("send", exch.send_expr), ("receive", exch.receive_expr)):
                if expr.variable not in var_names:
                    self.error(
                        "UNBOUND_VARIABLE", f"{path}/exchange[{exch.name}]",
                        f"{label} expression references unknown variable {expr.variable!r}",
                    )
                if expr.role not in roles:
                    self.error(
                        "UNDECLARED_ROLE", f"{path}/exchange[{exch.name}]",
                        f"{label} expression references undeclared role {expr.role!r}",
                    )
            if exch.information_type not in {t.name for t in self.pkg.information_types}:
                self.error(
                    "UNDECLARED_INFORMATION_TYPE", f"{path}/exchange[{exch.name}]",
                    f"exchange references undeclared informationType {exch.information_type!r}",
                )

        if inter.channel_variable is not None and inter.channel_variable not in var_names:
            self.warn(
                "UNDECLARED_CHANNEL", path,
                f"channelVariable {inter.channel_variable!r} is not defined in choreography {chor.name!r}",
            )


def validate_package(pkg: ChoreographyPackage) -> list[Diagnostic]:
    """Sweep the whole package and return diagnostics in document order.

    The sweep never aborts at the first finding, so the result doubles as a
    lint report. An empty list means every structural invariant holds.
    """
    return _Validator(pkg).run()


def has_errors(diagnostics: list[Diagnostic]) -> bool:
    return any(d.severity is Severity.ERROR for d in diagnostics)
