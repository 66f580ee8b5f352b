"""Unit conversions. Everything internal is SI; these are used at I/O boundaries."""

MPH = 0.44704  # m/s per mph
MILE = 1609.344  # m per mile
HOUR = 3600.0


def mps_to_mph(v):
    return v / MPH


def mph_to_mps(v):
    return v * MPH


def per_m_to_per_mile(rho):
    return rho * MILE


def per_s_to_per_h(q):
    return q * HOUR
