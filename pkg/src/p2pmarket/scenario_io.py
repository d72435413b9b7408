"""Scenario files: a versioned, schema-validated JSON document.

Sections: time, buses, lines, prosumers (devices inline),
passive_consumers, trade_links, pricing, plus an optional ``algorithm``
block of clearing defaults. Units follow the in-memory model (kW, kWh,
EUR/kWh, p.u., rad). Unknown keys are rejected; scalars broadcast to
horizon-length vectors at load time. Neighbor sets and the aggregate
passive load are derived, never stored.
"""

from __future__ import annotations

import json

import jsonschema
import numpy as np

from p2pmarket import model
from p2pmarket.model import (Bus, DispatchableUnit, GridPricing, Line,
                             PassiveConsumer, Prosumer, Scenario, StorageUnit,
                             TimeGrid, TradeLink)

__all__ = ["SCHEMA_VERSION", "ScenarioIOError", "load_scenario",
           "save_scenario", "scenario_to_dict", "scenario_from_dict"]

SCHEMA_VERSION = 1


class ScenarioIOError(ValueError):
    """Scenario file rejected (schema violation or broken invariant)."""


def _num_or_profile():
    return {"oneOf": [{"type": "number"},
                      {"type": "array", "items": {"type": "number"},
                       "minItems": 1}]}


SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "time", "buses", "lines", "prosumers",
                 "passive_consumers", "trade_links", "pricing"],
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "time": {
            "type": "object", "additionalProperties": False,
            "required": ["horizon_steps"],
            "properties": {
                "horizon_steps": {"type": "integer", "minimum": 1},
                "sampling_hours": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "buses": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["id"],
                "properties": {
                    "id": {"type": "integer"},
                    "theta_min": {"type": "number"},
                    "theta_max": {"type": "number"},
                    "v_min": {"type": "number"},
                    "v_max": {"type": "number"},
                    "grid_connected": {"type": "boolean"},
                },
            },
        },
        "lines": {
            "type": "array",
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["from", "to", "susceptance", "conductance",
                             "capacity"],
                "properties": {
                    "from": {"type": "integer"},
                    "to": {"type": "integer"},
                    "susceptance": {"type": "number"},
                    "conductance": {"type": "number"},
                    "capacity": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
        "prosumers": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["id", "bus", "demand"],
                "properties": {
                    "id": {"type": "integer"},
                    "bus": {"type": "integer"},
                    "demand": _num_or_profile(),
                    "dispatchable": {
                        "type": "object", "additionalProperties": False,
                        "required": ["lin_coeff", "p_min", "p_max"],
                        "properties": {
                            "quad_coeff": _num_or_profile(),
                            "lin_coeff": _num_or_profile(),
                            "p_min": {"type": "number"},
                            "p_max": {"type": "number"},
                        },
                    },
                    "storage": {
                        "type": "object", "additionalProperties": False,
                        "required": ["capacity", "p_ch_max", "p_ds_max"],
                        "properties": {
                            "cost_coeff": {"type": "number", "minimum": 0},
                            "capacity": {"type": "number", "exclusiveMinimum": 0},
                            "leakage": {"type": "number"},
                            "charge_eff": {"type": "number"},
                            "discharge_eff": {"type": "number"},
                            "soc_min": {"type": "number"},
                            "soc_max": {"type": "number"},
                            "p_ch_max": {"type": "number", "minimum": 0},
                            "p_ds_max": {"type": "number", "minimum": 0},
                            "soc_init": {"type": "number"},
                        },
                    },
                },
            },
        },
        "passive_consumers": {
            "type": "array",
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["bus", "demand"],
                "properties": {
                    "bus": {"type": "integer"},
                    "demand": _num_or_profile(),
                },
            },
        },
        "trade_links": {
            "type": "array",
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["a", "b"],
                "properties": {
                    "a": {"type": "integer"},
                    "b": {"type": "integer"},
                    "trade_cost": {"type": "number", "minimum": 0},
                    "trade_cap": {"type": "number", "minimum": 0},
                },
            },
        },
        "pricing": {
            "type": "object", "additionalProperties": False,
            "required": ["price_coeff", "agg_min", "agg_max"],
            "properties": {
                "price_coeff": _num_or_profile(),
                "tariff": {"type": "number", "minimum": 0},
                "agg_min": {"type": "number"},
                "agg_max": {"type": "number"},
            },
        },
        "algorithm": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["gne", "wardrop"]},
                "max_outer_iters": {"type": "integer", "minimum": 1},
                "primal_tol": {"type": "number", "exclusiveMinimum": 0},
                "coupling_tol": {"type": "number", "exclusiveMinimum": 0},
                "safety": {"type": "number"},
                "seed": {"type": "integer"},
                "trace_stride": {"type": "integer", "minimum": 1},
            },
        },
    },
}


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as err:
        path = "$" + "".join(f"[{p!r}]" for p in err.absolute_path)
        raise ScenarioIOError(f"schema violation at {path}: {err.message}") from None

    time = TimeGrid(doc["time"]["horizon_steps"],
                    doc["time"].get("sampling_hours", 1.0))
    H = time.horizon_steps
    prof = lambda v: model.as_profile(v, H)

    links = []
    partners = {}
    for raw in doc["trade_links"]:
        link = TradeLink(pair=(raw["a"], raw["b"]),
                         trade_cost=raw.get("trade_cost", 0.0),
                         trade_cap=raw.get("trade_cap", 0.0))
        links.append(link)
        i, j = link.pair
        partners.setdefault(i, set()).add(j)
        partners.setdefault(j, set()).add(i)

    prosumers = []
    try:
        for raw in doc["prosumers"]:
            dispatchable = None
            if "dispatchable" in raw:
                d = raw["dispatchable"]
                dispatchable = DispatchableUnit(
                    quad_coeff=prof(d.get("quad_coeff", 0.0)),
                    lin_coeff=prof(d["lin_coeff"]),
                    p_min=d["p_min"], p_max=d["p_max"])
            storage = None
            if "storage" in raw:
                s = raw["storage"]
                storage = StorageUnit(
                    cost_coeff=s.get("cost_coeff", 0.0), capacity=s["capacity"],
                    leakage=s.get("leakage", 1.0),
                    charge_eff=s.get("charge_eff", 1.0),
                    discharge_eff=s.get("discharge_eff", 1.0),
                    soc_min=s.get("soc_min", 0.0), soc_max=s.get("soc_max", 1.0),
                    p_ch_max=s["p_ch_max"], p_ds_max=s["p_ds_max"],
                    soc_init=s.get("soc_init", 0.5))
            prosumers.append(Prosumer(
                id=raw["id"], bus_id=raw["bus"], demand=prof(raw["demand"]),
                dispatchable=dispatchable, storage=storage,
                neighbors=frozenset(partners.get(raw["id"], ()))))

        buses = tuple(Bus(id=b["id"],
                          theta_min=b.get("theta_min", -0.25),
                          theta_max=b.get("theta_max", 0.25),
                          v_min=b.get("v_min", 0.95),
                          v_max=b.get("v_max", 1.05),
                          grid_connected=b.get("grid_connected", False))
                      for b in doc["buses"])
        lines = tuple(Line(pair=(l["from"], l["to"]),
                           susceptance=l["susceptance"],
                           conductance=l["conductance"],
                           capacity=l["capacity"]) for l in doc["lines"])
        passive = tuple(PassiveConsumer(bus_id=c["bus"], demand=prof(c["demand"]))
                        for c in doc["passive_consumers"])
        p = doc["pricing"]
        pricing = GridPricing(price_coeff=prof(p["price_coeff"]),
                              tariff=p.get("tariff", 0.0),
                              agg_min=p["agg_min"], agg_max=p["agg_max"])
        return Scenario(time=time, prosumers=tuple(prosumers),
                        passive_consumers=passive, trade_links=tuple(links),
                        buses=buses, lines=lines, pricing=pricing)
    except model.ModelError as err:
        raise ScenarioIOError(str(err)) from None


def scenario_to_dict(scenario: Scenario, algorithm: dict = None) -> dict:
    def cell(arr):
        arr = np.asarray(arr)
        if arr.size and np.all(arr == arr.reshape(-1)[0]):
            return float(arr.reshape(-1)[0])
        return arr.tolist()

    doc = {
        "version": SCHEMA_VERSION,
        "time": {"horizon_steps": scenario.time.horizon_steps,
                 "sampling_hours": scenario.time.sampling_hours},
        "buses": [{"id": b.id, "theta_min": b.theta_min, "theta_max": b.theta_max,
                   "v_min": b.v_min, "v_max": b.v_max,
                   "grid_connected": b.grid_connected} for b in scenario.buses],
        "lines": [{"from": l.pair[0], "to": l.pair[1],
                   "susceptance": l.susceptance, "conductance": l.conductance,
                   "capacity": l.capacity} for l in scenario.lines],
        "prosumers": [],
        "passive_consumers": [{"bus": c.bus_id, "demand": cell(c.demand)}
                              for c in scenario.passive_consumers],
        "trade_links": [{"a": l.pair[0], "b": l.pair[1],
                         "trade_cost": l.trade_cost, "trade_cap": l.trade_cap}
                        for l in scenario.trade_links],
        "pricing": {"price_coeff": cell(scenario.pricing.price_coeff),
                    "tariff": scenario.pricing.tariff,
                    "agg_min": scenario.pricing.agg_min,
                    "agg_max": scenario.pricing.agg_max},
    }
    for p in scenario.prosumers:
        raw = {"id": p.id, "bus": p.bus_id, "demand": cell(p.demand)}
        if p.dispatchable is not None:
            d = p.dispatchable
            raw["dispatchable"] = {"quad_coeff": cell(d.quad_coeff),
                                   "lin_coeff": cell(d.lin_coeff),
                                   "p_min": d.p_min, "p_max": d.p_max}
        if p.storage is not None:
            s = p.storage
            raw["storage"] = {"cost_coeff": s.cost_coeff, "capacity": s.capacity,
                              "leakage": s.leakage, "charge_eff": s.charge_eff,
                              "discharge_eff": s.discharge_eff,
                              "soc_min": s.soc_min, "soc_max": s.soc_max,
                              "p_ch_max": s.p_ch_max, "p_ds_max": s.p_ds_max,
                              "soc_init": s.soc_init}
        doc["prosumers"].append(raw)
    if algorithm:
        doc["algorithm"] = dict(algorithm)
    return doc


def load_scenario(path, with_algorithm: bool = False):
    """Parse and validate one scenario file."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise ScenarioIOError(f"{path}: not valid JSON (line {err.lineno}: "
                              f"{err.msg})") from None
    scenario = scenario_from_dict(doc)
    if with_algorithm:
        return scenario, doc.get("algorithm", {})
    return scenario


def save_scenario(scenario: Scenario, path, algorithm: dict = None):
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scenario, algorithm), fh, indent=1)
        fh.write("\n")
