"""Drive the simulated car, look at actuation delay, and build one training task.

Run: python demos/plant_and_tasks.py
"""

import numpy as np

from metampc.tasks import FourierActionSpec, GeneratorConfig, ParamRanges, generate_tasks
from metampc.vehicle import make_state, nominal_params, simulate, simulate_delayed

car = nominal_params()
print("nominal car:", {k: round(v, 3) for k, v in car.to_dict().items()})

# Constant throttle with a left steering step after one second.
dt = 0.05
actions = np.zeros((80, 2))
actions[:, 0] = 0.3
actions[20:, 1] = 0.6
states = simulate(make_state(v_x=1.0), actions, car, dt)
print(f"after 4 s: speed {states[-1, 3]:.2f} m/s, yaw rate {states[-1, 5]:.2f} rad/s, "
      f"heading {np.degrees(states[-1, 2]):.0f} deg")

# With a delay the logged command leads the response it causes.
slow = car.replace(t_d=0.1)
delayed = simulate_delayed(make_state(v_x=1.0), actions, slow, dt)
command = int(np.argmax(delayed.aligned_actions[:, 1] > 0))
response = int(np.argmax(np.abs(delayed.aligned_states[:, 5]) > 1e-6))
print(f"delay {slow.t_d} s = {slow.delay_steps(dt)} steps: steer logged at sample {command}, "
      f"yaw rate responds at sample {response}")

# One meta-training task: a random car under random smooth inputs, cut into windows.
task = generate_tasks(ParamRanges(), FourierActionSpec(), GeneratorConfig(n=10), seed=0, indices=[0])[0]
support, query = task.split(0.5)
print(f"task windows {task.windows.shape}, targets {task.targets.shape}, "
      f"support {len(support[0])}, query {len(query[0])}")
print("first window (v_x, v_y, omega, throttle, steer):")
print(np.array2string(task.windows[0][:3], precision=3))
