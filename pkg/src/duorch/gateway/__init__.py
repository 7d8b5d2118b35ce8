from .policy import ResourcePolicy, ReservationDirective, decide_reservation
from .runtime import STEPS, DeployedApp, GatewayError, RunHandle, Runtime
