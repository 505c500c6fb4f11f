"""Hypothesis strategies for wire messages, drawn on the codec's fixed-point grid."""

from hypothesis import strategies as st

from vanetsim.geo import GeoPosition, StationType
from vanetsim.messages import Cam, Denm, EventType, ObuInfo, SizeWeightClass, Vam, VruProfile

u32 = st.integers(0, 2**32 - 1)
u16 = st.integers(0, 2**16 - 1)
angles = st.integers(0, 3599).map(lambda k: k / 10)
speeds = st.integers(0, 0xFFFF).map(lambda k: k / 100)
decimetres = st.integers(-32768, 32767).map(lambda k: k / 10)

positions = st.builds(
    GeoPosition,
    st.integers(-90_000_000, 90_000_000).map(lambda k: k / 1e6),
    st.integers(-180_000_000, 180_000_000).map(lambda k: k / 1e6),
    decimetres,
)

cams = st.builds(Cam, u32, st.sampled_from(list(StationType)), positions, speeds, angles,
                 st.integers(0, 255), u32)

event_types = st.one_of(st.sampled_from(list(EventType)),
                        st.integers(0, 255).filter(lambda c: c not in set(EventType)))
denms = st.builds(Denm, u32, event_types, positions, u32, st.integers(1, 0xFFFF), u16)

vams = st.builds(Vam, u32, positions, decimetres, angles, speeds, angles, angles,
                 st.sampled_from(list(SizeWeightClass)), st.sampled_from(list(VruProfile)))

obu_infos = st.builds(ObuInfo, cams, st.integers(-127, 0), u32)

any_message = st.one_of(cams, denms, vams, obu_infos)
