"""Simulated 5G private-network security testbed with WireGuard and IPsec tunnels."""

from .crypto_tunnel import StaticKeypair, TunnelEngine, keygen
from .esp_tunnel import EspEndpoint, ike_mock_establish
from .kpi import measure_rtt, measure_throughput
from .n2gate import N2Gate
from .netsim import Simulator
from .ran import MODES, Deployment, build_deployment, default_topology
from .threatlab import SCENARIOS, ScenarioVerdict, expected_pass, run_scenario
from .wire_codec import parse_topology, parse_wg_config, serialize_topology, serialize_wg_config

__version__ = "0.1.0"

__all__ = [
    "MODES", "SCENARIOS", "Deployment", "EspEndpoint", "N2Gate", "ScenarioVerdict",
    "Simulator", "StaticKeypair", "TunnelEngine", "build_deployment", "default_topology",
    "expected_pass", "ike_mock_establish", "keygen", "measure_rtt", "measure_throughput",
    "parse_topology", "parse_wg_config", "run_scenario", "serialize_topology",
    "serialize_wg_config",
]
