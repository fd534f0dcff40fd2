"""Diffusive load balancing: pile 240 packets on one cluster of a 4x2 cluster
grid and watch the queue load spread out, one diffusion period at a time.
The TBUs never finish, so every byte is queued, held by a TBU or in transit."""

from octosim.scenarios import cluster_loads, equilibrium_fabric, grid_diameter

f = equilibrium_fabric([240, 0, 0, 0, 0, 0, 0, 0])
period = f.config.diffusion_period
print("cluster grid", f.cluster_grid, "diameter", grid_diameter(f))
for k in range(grid_diameter(f) + 1):
    f.run(k * period)
    loads = [b // 1024 for b in cluster_loads(f)]
    # queue reservations cover both packets held by TBUs and inbound transfers
    held = sum(x.packet.size_bytes for x in f.tbus if x.packet is not None)
    moving = (sum(q.reserved for q in f.queues.values()) - held) // 1024
    print(f"t={k * period:>7d}  KB per cluster {loads}  held {held // 1024} KB  in transit {moving} KB  "
          f"spread {max(loads) - min(loads)} KB")
