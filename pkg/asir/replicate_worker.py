# cpu worker that runs a contiguous batch of ASIR replicates.
# run with: flash run
# test directly: python -m asir.replicate_worker
from runpod_flash import CpuInstanceType, Endpoint


@Endpoint(
    name="asir_replicates",
    cpu=CpuInstanceType.CPU3C_8_16,
    workers=(0, 10),
    idle_timeout=30,
    dependencies=[
        "numpy>=1.26",
        "scipy>=1.11.0",
        "pandas>=2.0",
    ],
)
async def simulate_replicates(payload: dict) -> dict:
    """
    Simulate replicates [start, stop) of one ASIR configuration.

    Payload: {"config": AsirConfig.to_payload(), "replicates": [start, stop]}.
    Returns {"status": "success", "start", "counts", "events"} or
    {"status": "error", "replicate", "message"}.
    """
    from asir.ensemble import run_batch_payload

    return run_batch_payload(payload)


if __name__ == "__main__":
    import asyncio

    from asir.engine import AsirConfig
    from asir.markov import validate_matrix

    async def test():
        config = AsirConfig(
            alpha_prime=0.4,
            beta_prime=0.0,
            map=validate_matrix([[0.5, 0.5], [0.5, 0.5]]),
            n_agents=2,
            s0=1,
            i0=1,
            r0=0,
            horizon=1,
        )
        print("\n=== Testing Replicate Batch ===")
        result = await simulate_replicates({"config": config.to_payload(), "replicates": [0, 4]})
        print(f"Result: {result}\n")

    asyncio.run(test())
