"""
Named timing models. The GPU presets are fitted from measured
(full latency, time to first action) pairs at 30 Hz control.
"""

from core.exceptions import ConfigError
from pipeline.timing import TimingModel

# (full latency, TTFA, horizon, per-packet streaming cost), seconds
MEASURED = {
    "pi05-4090": (0.0800, 0.0621, 50, 0.0029),
    "pi05-4060": (0.3033, 0.2386, 50, 0.0029),
    "xvla-4090": (0.1137, 0.0448, 30, 0.0020),
    "xvla-4060": (0.3995, 0.1292, 30, 0.0020),
}

DESK_VLM = 0.096222
DESK_AE = 0.003678


def _fitted(name):
    full, ttfa, horizon, packet_cost = MEASURED[name]
    return TimingModel.fit(full, ttfa, N=10, horizon=horizon, packet_cost=packet_cost)


PRESETS = {name: _fitted(name) for name in MEASURED}
# desk-scale timing used by the simulator and loopback runs
PRESETS["desk"] = TimingModel(dt_vlm=DESK_VLM, dt_ae=DESK_AE, N=10, horizon=50)

TABLE_PRESETS = ("pi05-4090", "pi05-4060", "xvla-4090", "xvla-4060")


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown timing preset {name!r}; choose one of {', '.join(sorted(PRESETS))}",
            path="timing.preset",
        ) from None
