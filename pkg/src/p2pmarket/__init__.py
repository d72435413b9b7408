"""Peer-to-peer prosumer energy market: simulator, clearing algorithm, oracle.

Clears a multi-horizon prosumer market (generation, storage, bilateral
trades, main-grid imports, linearized network constraints) as a generalized
aggregative game. The semi-decentralized clearing loop lives in
:mod:`p2pmarket.clearing`; a centralized certification oracle in
:mod:`p2pmarket.oracle`; scenario I/O, instance generators, experiment
drivers and the CLI in the toolkit modules.
"""

from p2pmarket import model
from p2pmarket.model import Scenario, ProsumerDecision, GridDecision

__all__ = ["model", "Scenario", "ProsumerDecision", "GridDecision"]

__version__ = "0.1.0"
