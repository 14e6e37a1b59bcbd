"""Physical constants (SI)."""

# Speed of light in vacuum [m/s]
C0 = 299792458.0

# Vacuum permittivity [F/m]
EPS0 = 8.8541878128e-12

# Vacuum permeability [H/m]
MU0 = 1.25663706212e-6

# Electron charge magnitude [C] and mass [kg]
Q_E = 1.602176634e-19
M_E = 9.1093837015e-31
