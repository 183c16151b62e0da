"""Find rate gains for a new morphology, then fetch them from a gain database instead.

Run: python3 demos/tuning_walkthrough.py
"""

from parceldrone.autotune import fixture_database, lookup, tune_morphology
from parceldrone.core import ParcelSpec
from parceldrone.morphogen import generate_morphology

parcel = ParcelSpec(mass=0.5, length=0.7, width=0.36, height=0.08)
morph = generate_morphology(parcel)
print(f"{morph.n} modules, descriptor (Ixx, Iyy, mass, n) = "
      f"{tuple(round(v, 4) for v in morph.descriptor())}")

# Direct tuning: each axis is freed on a simulated rig and the proportional gain is
# raised until the rate loop sustains an oscillation.
fresh = tune_morphology(morph)
print(f"tuned  roll {tuple(round(v, 4) for v in fresh.roll)}")
print(f"tuned  pitch {tuple(round(v, 4) for v in fresh.pitch)}")

# The shipped database holds nine pre-tuned parcels; nearby morphologies get a
# kernel-weighted blend of their gains, which costs microseconds instead of seconds.
db = fixture_database()
blended = lookup(db, morph.descriptor())
print(f"lookup roll {tuple(round(v, 4) for v in blended.roll)}")
print(f"lookup pitch {tuple(round(v, 4) for v in blended.pitch)}")
