"""Fly platform A through the indoor figure-eight and the outdoor waypoint mission.

Run: python3 demos/flight_walkthrough.py
"""

import math

from parceldrone.flightlab import (align_and_trim, cross_track_error, outdoor_plan,
                                   platform_bundle, run_indoor_experiment,
                                   run_outdoor_mission, tracking_report)
from parceldrone.simdyn import SafetyPolicy

bundle = platform_bundle("A")

# Three seeded indoor runs; seeds change the sensor noise, drafts and motor spread.
logs = [align_and_trim(run_indoor_experiment(bundle, seed)) for seed in range(3)]
print(tracking_report(logs).table())

# Outdoor: 50 m out on a bearing of 16 degrees at 5 m, back, and land, in gusty wind.
log = run_outdoor_mission(bundle, seed=0)
wp = outdoor_plan().steps[1].waypoint[:2]
print(f"max cross-track {cross_track_error(log, wp).max():.3f} m, "
      f"landed {math.hypot(*log.position[-1, :2]):.3f} m from home")

# A module battery drops out ten seconds in; this policy lands on the first one.
log = run_outdoor_mission(bundle, seed=0, policy=SafetyPolicy(k_return=1, k_land=1),
                          discharge_at=(10.0, 2))
print("segments after a discharge:", " -> ".join(log.segment_names()))
