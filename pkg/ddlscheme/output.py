"""CSV, VTK, manifest and key-value writers for run and verification results."""

import configparser
import csv
import hashlib
import logging

import numpy as np

from ddlscheme.assembly import merge_states
from ddlscheme.constitutive import PHASES, saturation
from ddlscheme.mesh import SUBDOMAINS, NodeClass, write_vtk

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "{:.17g}"

FIELD_COLUMNS = ["node_id", "x", "y", "p_w", "p_g", "S"]
CONVERGENCE_COLUMNS = [
    "time_step",
    "iteration",
    "phase",
    "subdomain",
    "increment_norm",
    "g_update_norm",
    "monitor_E",
    "seconds",
]
ERROR_COLUMNS = [
    "case",
    "h",
    "tau",
    "L2_w",
    "L2_g",
    "H1_w",
    "H1_g",
    "jump",
    "flux_mismatch",
    "order_L2_w",
    "order_L2_g",
    "order_H1_w",
    "order_H1_g",
]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT.format(float(value))
    return str(value)


def nodal_fields(context, states):
    """
    Global ``(p_w, p_g, S)``; interface values average both sides and both layer laws.
    """
    p_w, p_g = merge_states(states, context)
    s = np.zeros(context.mesh.n_nodes)
    count = np.zeros(context.mesh.n_nodes)
    for subdomain in SUBDOMAINS:
        nodes = context.dof_map(subdomain).nodes
        s[nodes] += np.asarray(saturation(context.layer(subdomain), p_g[nodes], p_w[nodes]))
        count[nodes] += 1.0
    return p_w, p_g, s / count


def write_fields_csv(path, context, states):
    p_w, p_g, s = nodal_fields(context, states)
    nodes = context.mesh.nodes
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(FIELD_COLUMNS)
        for node in range(context.mesh.n_nodes):
            writer.writerow(
                [node] + [_fmt(v) for v in (nodes[node, 0], nodes[node, 1], p_w[node], p_g[node], s[node])]
            )


def write_fields_vtk(path, context, states):
    p_w, p_g, s = nodal_fields(context, states)
    interface = np.array(
        [1.0 if c is NodeClass.INTERFACE else 0.0 for c in context.mesh.node_class]
    )
    write_vtk(context.mesh, path, {"p_w": p_w, "p_g": p_g, "S": s, "interface": interface})


def convergence_rows(reports):
    """One row per iteration, phase and subdomain of every report."""
    for report in reports:
        for record in report.records:
            for phase in PHASES:
                for subdomain in SUBDOMAINS:
                    key = (phase, subdomain)
                    yield [
                        report.time_level,
                        record.iteration,
                        phase.value,
                        subdomain,
                        _fmt(record.increments[key]),
                        _fmt(record.g_updates[key]),
                        _fmt(record.monitor),
                        _fmt(record.seconds),
                    ]


def write_convergence_log(path, reports):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(CONVERGENCE_COLUMNS)
        writer.writerows(convergence_rows(reports))


def write_error_report(path, case_id, error_reports):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(ERROR_COLUMNS)
        for report in error_reports:
            l2 = [report.l2[p] for p in PHASES]
            h1 = [report.h1[p] for p in PHASES]
            orders = [
                report.orders.get(name)
                for name in ("L2_w", "L2_g", "H1_w", "H1_g")
            ]
            writer.writerow(
                [case_id]
                + [_fmt(v) for v in [report.h, report.tau] + l2 + h1]
                + [_fmt(report.jump), _fmt(report.flux_mismatch)]
                + [_fmt(v) for v in orders]
            )


def artifact_version(package_version, config_text):
    """``ddlscheme <version>+cfg.<hash>`` identifying code and configuration."""
    digest = hashlib.sha1(config_text.encode("utf-8")).hexdigest()[:10]
    return f"ddlscheme {package_version}+cfg.{digest}"


def write_manifest(path, config_text, resolved, constants, admissibility, version):
    """
    Writes the run manifest before any field output.

    Args:
        path (Path): Target file.
        config_text (str): The scenario file as read.
        resolved (dict): Values derived from the scenario, such as ``L`` and ``tau``.
        constants (tuple): RegularityConstants per layer.
        admissibility (AdmissibilityReport): The pre-run check.
        version (str): Artifact version string.
    """
    echo = configparser.ConfigParser(interpolation=None)
    echo.read_string(config_text)
    manifest = configparser.ConfigParser(interpolation=None)
    manifest["config"] = {
        f"{section}.{key}": value
        for section in echo.sections()
        for key, value in echo.items(section)
    }
    manifest["resolved"] = {key: _fmt(value) for key, value in resolved.items()}
    manifest["constants"] = {
        f"layer{layer}.{name}": _fmt(float(getattr(c, name)))
        for layer, c in zip(SUBDOMAINS, constants)
        for name in ("lipschitz_S", "lipschitz_kw", "lipschitz_kg", "mobility_lower", "mobility_upper")
    }
    manifest["admissibility"] = {key: _fmt(value) for key, value in admissibility.as_dict().items()}
    manifest["version"] = {"artifact": version}
    with open(path, "w", encoding="utf-8") as handle:
        manifest.write(handle)


def append_summary(path, summary):
    section = configparser.ConfigParser(interpolation=None)
    section["summary"] = {key: _fmt(value) for key, value in summary.items()}
    with open(path, "a", encoding="utf-8") as handle:
        section.write(handle)


def write_key_values(path, values):
    with open(path, "w", encoding="utf-8") as handle:
        for key, value in values.items():
            handle.write(f"{key} = {_fmt(value)}\n")
