"""Slice a global choreography into the minimal per-role model a device loads.

A projection keeps only the interactions the role takes part in (as sender or
receiver), the guards it can evaluate itself, perform frames that transitively
contain such interactions, and the variable and type declarations those pieces
reference. Everything else is elided, so the serialized projection is strictly
smaller than the source package whenever the package contains any interaction
the role is not involved in.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .model import (
    Activity,
    ChannelType,
    Choreography,
    ChoreographyPackage,
    CloneType,
    Interaction,
    Parallel,
    Perform,
    Sequence,
    VariableDefinition,
    WorkUnit,
    iter_interactions,
)


class UnknownRole(Exception):
    pass


@dataclass(frozen=True)
class RoleProjection:
    """The per-device slice of a package: a single-role package document model."""

    role: str
    package: ChoreographyPackage

    @property
    def steps(self) -> tuple[Activity, ...]:
        """Projected activity trees, root choreography first."""
        ordered = sorted(self.package.choreographies, key=lambda c: not c.root)
        return tuple(c.body for c in ordered)

    @property
    def variables(self) -> tuple[VariableDefinition, ...]:
        out: list[VariableDefinition] = []
        for chor in self.package.choreographies:
            out.extend(chor.variables)
        return tuple(out)

    @property
    def clones(self) -> tuple[CloneType, ...]:
        return self.package.clone_types

    def interactions(self) -> list[Interaction]:
        out: list[Interaction] = []
        for chor in self.package.choreographies:
            out.extend(iter_interactions(chor.body))
        return out

    def is_empty(self) -> bool:
        return not self.package.choreographies


class _Projector:
    def __init__(self, pkg: ChoreographyPackage, role: str):
        self.pkg = pkg
        self.role = role

    def project(self) -> RoleProjection:
        kept: list[Choreography] = []
        for chor in self.pkg.choreographies:
            body = self._filter(chor.body)
            if body is None:
                continue
            kept.append(self._rebuild(chor, body))

        # A single-role document still needs an entry point: if the original
        # root contributed nothing for this role, the first kept choreography
        # starts the device's participation.
        if kept and not any(c.root for c in kept):
            first = kept[0]
            kept[0] = Choreography(first.name, True, first.relationships, first.variables, first.body)

        return RoleProjection(role=self.role, package=self._slice_package(kept))

    def _filter(self, activity: Activity) -> Activity | None:
        if isinstance(activity, Interaction):
            if self.role in (activity.from_role, activity.to_role):
                return activity
            return None
        if isinstance(activity, Sequence):
            children = tuple(c for c in (self._filter(child) for child in activity.children) if c is not None)
            return Sequence(children) if children else None
        if isinstance(activity, Parallel):
            children = tuple(c for c in (self._filter(child) for child in activity.children) if c is not None)
            return Parallel(children) if children else None
        if isinstance(activity, WorkUnit):
            body = self._filter(activity.body)
            if body is None:
                return None
            if activity.guard is not None and activity.guard.role == self.role:
                return WorkUnit(activity.name, activity.guard, body)
            # Guards over another role's variables are only evaluable there;
            # for everyone else the bare body remains (its receives still wait
            # for the triggering messages).
            return body
        if isinstance(activity, Perform):
            target = self.pkg.choreography(activity.choreography_name)
            if target is None:
                return None
            return activity if self._filter(target.body) is not None else None
        raise TypeError(f"unknown activity node {activity!r}")

    def _rebuild(self, chor: Choreography, body: Activity) -> Choreography:
        needed_vars: set[str] = set()
        needed_rels: set[str] = set()
        for inter in iter_interactions(body):
            needed_rels.add(inter.relationship)
            for exch in inter.exchanges:
                if exch.send_expr.role == self.role:
                    needed_vars.add(exch.send_expr.variable)
                if exch.receive_expr.role == self.role:
                    needed_vars.add(exch.receive_expr.variable)
            if inter.channel_variable:
                needed_vars.add(inter.channel_variable)
        for node in _walk(body):
            if isinstance(node, WorkUnit) and node.guard is not None and node.guard.role == self.role:
                needed_vars.add(node.guard.variable)

        return Choreography(
            name=chor.name,
            root=chor.root,
            relationships=tuple(r for r in chor.relationships if r in needed_rels),
            variables=tuple(v for v in chor.variables if v.name in needed_vars),
            body=body,
        )

    def _slice_package(self, choreographies: list[Choreography]) -> ChoreographyPackage:
        needed_roles: set[str] = {self.role} if choreographies else set()
        needed_rels: set[str] = set()
        needed_info: set[str] = set()
        needed_channels: set[str] = set()
        counterparts: set[str] = set()

        for chor in choreographies:
            for inter in iter_interactions(chor.body):
                needed_roles.update((inter.from_role, inter.to_role))
                needed_rels.add(inter.relationship)
                counterpart = inter.to_role if inter.from_role == self.role else inter.from_role
                counterparts.add(counterpart)
                for exch in inter.exchanges:
                    needed_info.add(exch.information_type)
                    needed_roles.update((exch.send_expr.role, exch.receive_expr.role))
            for var in chor.variables:
                if var.information_type is not None:
                    needed_info.add(var.information_type)
                if var.channel_type is not None:
                    needed_channels.add(var.channel_type)
            for node in _walk(chor.body):
                if isinstance(node, WorkUnit) and node.guard is not None:
                    needed_roles.add(node.guard.role)

        channels = tuple(c for c in self.pkg.channel_types if c.name in needed_channels)
        needed_roles.update(c.target_role for c in channels)
        clones = tuple(c for c in self.pkg.clone_types if set(c.role_refs) & counterparts)
        for clone in clones:
            needed_roles.update(clone.role_refs)

        return ChoreographyPackage(
            name=f"{self.pkg.name}_{self.role}" if self.pkg.name else self.role,
            information_types=tuple(t for t in self.pkg.information_types if t.name in needed_info),
            role_types=tuple(r for r in self.pkg.role_types if r.name in needed_roles),
            relationship_types=tuple(r for r in self.pkg.relationship_types if r.name in needed_rels),
            channel_types=channels,
            clone_types=clones,
            choreographies=tuple(choreographies),
        )


def _walk(activity: Activity):
    yield activity
    if isinstance(activity, (Sequence, Parallel)):
        for child in activity.children:
            yield from _walk(child)
    elif isinstance(activity, WorkUnit):
        yield from _walk(activity.body)


def project(pkg: ChoreographyPackage, role: str) -> RoleProjection:
    """Project a validated package onto one declared role."""
    if role not in pkg.role_names():
        raise UnknownRole(f"role {role!r} is not declared in package {pkg.name!r}")
    return _Projector(pkg, role).project()


def interaction_census(projections: list[RoleProjection]) -> Counter:
    """Count (interaction name, direction) occurrences across projections."""
    census: Counter = Counter()
    for proj in projections:
        for inter in proj.interactions():
            direction = "send" if inter.from_role == proj.role else "receive"
            census[(inter.name, direction)] += 1
    return census


def coverage_check(pkg: ChoreographyPackage) -> bool:
    """True iff projecting every role covers each interaction exactly twice.

    Every global interaction must appear once as a send (in its sender's
    projection) and once as a receive (in its receiver's) and nowhere else.
    """
    projections = [project(pkg, role) for role in sorted(pkg.role_names())]
    census = interaction_census(projections)

    expected: Counter = Counter()
    for chor in pkg.choreographies:
        for inter in iter_interactions(chor.body):
            expected[(inter.name, "send")] += 1
            expected[(inter.name, "receive")] += 1
    return census == expected
