"""Flat array layouts shared by the Python and compiled kernels.

Flat node (18 floats)::

    [0:3]   position p
    [3]     yaw
    [4:7]   velocity
    [7:10]  acceleration
    [10:13] jerk
    [13:16] snap
    [16]    yaw rate
    [17]    yaw acceleration

Rigid-body state (18 floats): position, velocity, rotation matrix (row major),
body angular velocity.

Input (4 floats): collective thrust, body torque.

Parameter vector (22 floats): mass, gravity, thrust singularity threshold,
heading singularity threshold, inertia (row major), inverse inertia.
"""

FLAT_DIM = 18
STATE_DIM = 18
INPUT_DIM = 4
ERR_DIM = 12  # state difference: dp, dv, log(R), dw
NODE_RES_DIM = ERR_DIM + INPUT_DIM + ERR_DIM  # nu, phi, gamma
GOAL_DIM = STATE_DIM + INPUT_DIM
PARAM_DIM = 22

P = slice(0, 3)
YAW = 3
VEL = slice(4, 7)
ACC = slice(7, 10)
JERK = slice(10, 13)
SNAP = slice(13, 16)
DYAW = 16
DDYAW = 17

S_POS = slice(0, 3)
S_VEL = slice(3, 6)
S_ROT = slice(6, 15)
S_OMEGA = slice(15, 18)
