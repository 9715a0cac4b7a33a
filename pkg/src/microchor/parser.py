"""Read and write choreography package documents.

The document format is the XML subset used by small-device interpreters:
``package`` with information/role/relationship/channel declarations, the
``cloneType`` replacement-device extension, and choreographies built from
``sequence``, ``parallel``, ``workunit`` (guarded), ``interaction`` (with
``participate``, ``exchange`` and ``timeout``) and ``perform`` elements.

Namespace prefixes such as ``tns:`` are stripped to local names during
resolution; cross-package references are not supported. Elements outside the
subset are reported as warnings, never as parse failures.
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET

from .model import (
    Activity,
    ChannelType,
    Choreography,
    ChoreographyPackage,
    CloneType,
    CloneUsage,
    Diagnostic,
    Duration,
    Exchange,
    ExchangeAction,
    GetVariable,
    InformationType,
    Interaction,
    IsVariableAvailable,
    Parallel,
    Perform,
    RelationshipType,
    RoleType,
    Sequence,
    Severity,
    VariableDefinition,
    WorkUnit,
)

ACTIVITY_TAGS = ("sequence", "parallel", "workunit", "interaction", "perform")

_DURATION_RE = re.compile(r"^P(?:(\d+)D)?(?:T(?:(\d+)H)?(?:(\d+)M)?(?:(\d+)S)?)?$")
_EXPR_RE = re.compile(r"^(?:cdl:)?(getVariable|isVariableAvailable)\(\s*([^,()\s]+)\s*,\s*([^,()\s]+)\s*\)$")


class ParseError(Exception):
    """Raised for malformed documents; carries line/column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


def local_name(qualified: str | None) -> str | None:
    """Strip a namespace prefix (``tns:Foo``) or Clark notation (``{uri}Foo``)."""
    if qualified is None:
        return None
    if qualified.startswith("{"):
        return qualified.rsplit("}", 1)[-1]
    return qualified.rsplit(":", 1)[-1]


def parse_duration(text: str) -> Duration:
    """Parse a PnDTnHnMnS duration into whole seconds.

    Year, month and week designators are rejected: their length in seconds is
    ambiguous and no supported document uses them.
    """
    match = _DURATION_RE.match(text.strip())
    if not match or not any(match.groups()):
        raise ParseError(f"malformed duration {text!r}")
    if "T" in text and text.rstrip().endswith("T"):
        raise ParseError(f"malformed duration {text!r}")
    days, hours, minutes, seconds = (int(g) if g else 0 for g in match.groups())
    return Duration(days * 86400 + hours * 3600 + minutes * 60 + seconds)


def parse_expression(text: str, path: str) -> GetVariable | IsVariableAvailable:
    match = _EXPR_RE.match(text.strip())
    if not match:
        raise ParseError(f"unsupported expression {text!r} at {path}")
    func, variable, role = match.groups()
    variable = local_name(variable)
    role = local_name(role)
    if func == "getVariable":
        return GetVariable(variable, role)
    return IsVariableAvailable(variable, role)


def _bool_attr(elem: ET.Element, name: str, default: bool) -> bool:
    raw = elem.get(name)
    if raw is None:
        return default
    return raw.strip().lower() == "true"


class _DocumentReader:
    def __init__(self, warnings: list[Diagnostic] | None):
        self.warnings = warnings if warnings is not None else []

    def warn(self, code: str, path: str, message: str) -> None:
        self.warnings.append(Diagnostic(code, path, message, Severity.WARN))

    def read_package(self, root: ET.Element) -> ChoreographyPackage:
        if local_name(root.tag) != "package":
            raise ParseError(f"expected a package document, found <{local_name(root.tag)}>")
        name = local_name(root.get("name", ""))
        info: list[InformationType] = []
        roles: list[RoleType] = []
        relationships: list[RelationshipType] = []
        channels: list[ChannelType] = []
        clones: list[CloneType] = []
        choreographies: list[Choreography] = []

        for child in root:
            tag = local_name(child.tag)
            if tag == "informationType":
                info.append(InformationType(local_name(child.get("name", ""))))
            elif tag == "roleType":
                # behaviors children are accepted and ignored
                roles.append(RoleType(local_name(child.get("name", ""))))
            elif tag == "relationshipType":
                relationships.append(self._read_relationship(child))
            elif tag == "channelType":
                channels.append(self._read_channel(child))
            elif tag == "cloneType":
                clones.append(self._read_clone(child))
            elif tag == "choreography":
                choreographies.append(self._read_choreography(child))
            else:
                self.warn("UNKNOWN_ELEMENT", f"package/{tag}", f"unsupported package element <{tag}> ignored")

        return ChoreographyPackage(
            name=name,
            information_types=tuple(info),
            role_types=tuple(roles),
            relationship_types=tuple(relationships),
            channel_types=tuple(channels),
            clone_types=tuple(clones),
            choreographies=tuple(choreographies),
        )

    def _role_refs(self, elem: ET.Element) -> list[str]:
        refs = []
        for child in elem:
            if local_name(child.tag) == "roleType":
                ref = local_name(child.get("typeRef"))
                if ref:
                    refs.append(ref)
        return refs

    def _read_relationship(self, elem: ET.Element) -> RelationshipType:
        name = local_name(elem.get("name", ""))
        refs = self._role_refs(elem)
        if len(refs) != 2:
            raise ParseError(f"relationshipType {name!r} must reference exactly two roleTypes")
        return RelationshipType(name, refs[0], refs[1])

    def _read_channel(self, elem: ET.Element) -> ChannelType:
        name = local_name(elem.get("name", ""))
        refs = self._role_refs(elem)
        if len(refs) != 1:
            raise ParseError(f"channelType {name!r} must reference exactly one roleType")
        # identity children are accepted and ignored
        return ChannelType(name, refs[0])

    def _read_clone(self, elem: ET.Element) -> CloneType:
        name = local_name(elem.get("name", ""))
        usage_raw = elem.get("type")
        if usage_raw is None:
            usage = CloneUsage.PERMANENT
        elif usage_raw in (CloneUsage.ON_DEMAND.value, CloneUsage.PERMANENT.value):
            usage = CloneUsage(usage_raw)
        else:
            raise ParseError(f"cloneType {name!r} has unknown type {usage_raw!r}")
        return CloneType(
            name=name,
            role_refs=tuple(self._role_refs(elem)),
            usage=usage,
            interface=local_name(elem.get("interface")),
        )

    def _read_choreography(self, elem: ET.Element) -> Choreography:
        name = local_name(elem.get("name", ""))
        relationships: list[str] = []
        variables: list[VariableDefinition] = []
        body: Activity | None = None

        for child in elem:
            tag = local_name(child.tag)
            if tag == "relationship":
                ref = local_name(child.get("type"))
                if ref:
                    relationships.append(ref)
            elif tag == "variableDefinitions":
                for var in child:
                    if local_name(var.tag) != "variable":
                        continue
                    variables.append(
                        VariableDefinition(
                            name=local_name(var.get("name", "")),
                            information_type=local_name(var.get("informationType")),
                            channel_type=local_name(var.get("channelType")),
                            mutable=_bool_attr(var, "mutable", True),
                        )
                    )
            elif tag in ACTIVITY_TAGS:
                if body is not None:
                    raise ParseError(f"choreography {name!r} has more than one body activity")
                body = self._read_activity(child, f"choreography[{name}]")
            else:
                self.warn(
                    "UNKNOWN_ELEMENT", f"choreography[{name}]/{tag}",
                    f"unsupported choreography element <{tag}> ignored",
                )

        if body is None:
            body = Sequence(())
        return Choreography(
            name=name,
            root=_bool_attr(elem, "root", False),
            relationships=tuple(relationships),
            variables=tuple(variables),
            body=body,
        )

    def _read_activity(self, elem: ET.Element, path: str) -> Activity:
        tag = local_name(elem.tag)
        if tag == "sequence":
            return Sequence(self._read_children(elem, f"{path}/sequence"))
        if tag == "parallel":
            return Parallel(self._read_children(elem, f"{path}/parallel"))
        if tag == "workunit":
            return self._read_workunit(elem, path)
        if tag == "interaction":
            return self._read_interaction(elem, path)
        if tag == "perform":
            target = local_name(elem.get("choreographyName"))
            if not target:
                raise ParseError(f"perform without choreographyName at {path}")
            return Perform(target)
        raise ParseError(f"unsupported activity <{tag}> at {path}")

    def _read_children(self, elem: ET.Element, path: str) -> tuple[Activity, ...]:
        children = []
        for child in elem:
            tag = local_name(child.tag)
            if tag in ACTIVITY_TAGS:
                children.append(self._read_activity(child, path))
            else:
                self.warn("UNKNOWN_ELEMENT", f"{path}/{tag}", f"unsupported activity element <{tag}> ignored")
        return tuple(children)

    def _read_workunit(self, elem: ET.Element, path: str) -> WorkUnit:
        name = local_name(elem.get("name", ""))
        guard_raw = elem.get("guard")
        guard = parse_expression(guard_raw, f"{path}/workunit[{name}]") if guard_raw else None
        children = self._read_children(elem, f"{path}/workunit[{name}]")
        if len(children) == 1:
            body: Activity = children[0]
        else:
            body = Sequence(children)
        return WorkUnit(name=name, guard=guard, body=body)

    def _read_interaction(self, elem: ET.Element, path: str) -> Interaction:
        name = local_name(elem.get("name", ""))
        ipath = f"{path}/interaction[{name}]"
        relationship = ""
        from_role = ""
        to_role = ""
        exchanges: list[Exchange] = []
        timeout: Duration | None = None

        for child in elem:
            tag = local_name(child.tag)
            if tag == "participate":
                relationship = local_name(child.get("relationshipType", "")) or ""
                from_role = local_name(child.get("fromRole", "")) or ""
                to_role = local_name(child.get("toRole", "")) or ""
            elif tag == "exchange":
                exchanges.append(self._read_exchange(child, ipath))
            elif tag == "timeout":
                raw = child.get("time-to-complete")
                if raw:
                    timeout = parse_duration(raw)
            else:
                self.warn("UNKNOWN_ELEMENT", f"{ipath}/{tag}", f"unsupported interaction element <{tag}> ignored")

        if not relationship:
            raise ParseError(f"interaction {name!r} lacks a participate element at {path}")
        return Interaction(
            name=name,
            operation=local_name(elem.get("operation", "")) or "",
            relationship=relationship,
            from_role=from_role,
            to_role=to_role,
            exchanges=tuple(exchanges),
            channel_variable=local_name(elem.get("channelVariable")),
            initiate=_bool_attr(elem, "initiate", False),
            timeout=timeout,
        )

    def _read_exchange(self, elem: ET.Element, path: str) -> Exchange:
        name = local_name(elem.get("name", ""))
        action_raw = (elem.get("action") or "request").strip().lower()
        try:
            action = ExchangeAction(action_raw)
        except ValueError:
            raise ParseError(f"exchange {name!r} has unknown action {action_raw!r} at {path}") from None
        send_expr = receive_expr = None
        for child in elem:
            tag = local_name(child.tag)
            raw = child.get("variable", "")
            if tag == "send":
                send_expr = parse_expression(raw, f"{path}/exchange[{name}]/send")
            elif tag == "receive":
                receive_expr = parse_expression(raw, f"{path}/exchange[{name}]/receive")
        if send_expr is None or receive_expr is None:
            raise ParseError(f"exchange {name!r} must declare both send and receive at {path}")
        for label, expr in (("send", send_expr), ("receive", receive_expr)):
            if not isinstance(expr, GetVariable):
                raise ParseError(f"exchange {name!r} {label} must be a getVariable expression at {path}")
        return Exchange(
            action=action,
            name=name,
            information_type=local_name(elem.get("informationType", "")) or "",
            send_expr=send_expr,
            receive_expr=receive_expr,
        )


def parse_package(text: str | bytes, warnings: list[Diagnostic] | None = None) -> ChoreographyPackage:
    """Parse a package document.

    ``warnings``, when given, collects WARN diagnostics for elements outside
    the supported subset. Malformed markup raises :class:`ParseError` with
    line/column information.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        line, column = exc.position if exc.position else (None, None)
        raise ParseError(f"malformed document: {exc.msg.split(':')[0] if exc.msg else 'parse error'}",
                         line, column) from exc
    return _DocumentReader(warnings).read_package(root)


def _expr_text(expr: GetVariable | IsVariableAvailable) -> str:
    func = "getVariable" if isinstance(expr, GetVariable) else "isVariableAvailable"
    return f"cdl:{func}(tns:{expr.variable},{expr.role})"


class _DocumentWriter:
    def write_package(self, pkg: ChoreographyPackage) -> ET.Element:
        root = ET.Element("package", {"name": pkg.name})
        for info in pkg.information_types:
            ET.SubElement(root, "informationType", {"name": info.name})
        for role in pkg.role_types:
            ET.SubElement(root, "roleType", {"name": role.name})
        for rel in pkg.relationship_types:
            elem = ET.SubElement(root, "relationshipType", {"name": rel.name})
            ET.SubElement(elem, "roleType", {"typeRef": f"tns:{rel.role_a}"})
            ET.SubElement(elem, "roleType", {"typeRef": f"tns:{rel.role_b}"})
        for chan in pkg.channel_types:
            elem = ET.SubElement(root, "channelType", {"name": chan.name})
            ET.SubElement(elem, "roleType", {"typeRef": f"tns:{chan.target_role}"})
        for clone in pkg.clone_types:
            attrs = {"name": clone.name}
            if clone.interface:
                attrs["interface"] = clone.interface
            attrs["type"] = clone.usage.value
            elem = ET.SubElement(root, "cloneType", attrs)
            for ref in clone.role_refs:
                ET.SubElement(elem, "roleType", {"typeRef": f"tns:{ref}"})
        for chor in pkg.choreographies:
            root.append(self.write_choreography(chor))
        return root

    def write_choreography(self, chor: Choreography) -> ET.Element:
        elem = ET.Element("choreography", {"name": chor.name, "root": "true" if chor.root else "false"})
        for rel in chor.relationships:
            ET.SubElement(elem, "relationship", {"type": f"tns:{rel}"})
        if chor.variables:
            defs = ET.SubElement(elem, "variableDefinitions")
            for var in chor.variables:
                attrs = {"name": var.name}
                if var.information_type is not None:
                    attrs["informationType"] = f"tns:{var.information_type}"
                if var.channel_type is not None:
                    attrs["channelType"] = f"tns:{var.channel_type}"
                if not var.mutable:
                    attrs["mutable"] = "false"
                ET.SubElement(defs, "variable", attrs)
        elem.append(self.write_activity(chor.body))
        return elem

    def write_activity(self, activity: Activity) -> ET.Element:
        if isinstance(activity, Sequence):
            elem = ET.Element("sequence")
            for child in activity.children:
                elem.append(self.write_activity(child))
            return elem
        if isinstance(activity, Parallel):
            elem = ET.Element("parallel")
            for child in activity.children:
                elem.append(self.write_activity(child))
            return elem
        if isinstance(activity, WorkUnit):
            attrs = {"name": activity.name}
            if activity.guard is not None:
                attrs["guard"] = _expr_text(activity.guard)
            elem = ET.Element("workunit", attrs)
            elem.append(self.write_activity(activity.body))
            return elem
        if isinstance(activity, Perform):
            return ET.Element("perform", {"choreographyName": f"tns:{activity.choreography_name}"})
        return self.write_interaction(activity)

    def write_interaction(self, inter: Interaction) -> ET.Element:
        attrs = {"name": inter.name}
        if inter.channel_variable:
            attrs["channelVariable"] = f"tns:{inter.channel_variable}"
        attrs["operation"] = inter.operation
        if inter.initiate:
            attrs["initiate"] = "true"
        elem = ET.Element("interaction", attrs)
        ET.SubElement(
            elem, "participate",
            {
                "relationshipType": f"tns:{inter.relationship}",
                "fromRole": f"tns:{inter.from_role}",
                "toRole": f"tns:{inter.to_role}",
            },
        )
        for exch in inter.exchanges:
            xelem = ET.SubElement(
                elem, "exchange",
                {
                    "action": exch.action.value,
                    "name": exch.name,
                    "informationType": f"tns:{exch.information_type}",
                },
            )
            ET.SubElement(xelem, "send", {"variable": _expr_text(exch.send_expr)})
            ET.SubElement(xelem, "receive", {"variable": _expr_text(exch.receive_expr)})
        if inter.timeout is not None:
            ET.SubElement(elem, "timeout", {"time-to-complete": inter.timeout.to_iso()})
        return elem


def serialize_package(pkg: ChoreographyPackage) -> str:
    """Render a package back to document text.

    Output is deterministic: the same package always yields identical bytes,
    and ``parse_package(serialize_package(pkg))`` is semantically equal to
    ``pkg``.
    """
    root = _DocumentWriter().write_package(pkg)
    ET.indent(root, space="\t")
    return ET.tostring(root, encoding="unicode") + "\n"
