"""Writes the golden interchange files in tests/golden/ byte by byte, without
the library, and prints the float32 values the readers must produce."""
import os
import struct

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "..", "golden")


def f32le(values):
    return b"".join(struct.pack("<f", v) for v in values)


def grid():
    # 3 samples x 2 channels, channel-major.
    values = [0.5, -0.0, 1.25e-7, -3.0, 2.0 ** -149, 65504.0]
    head = (
        "SFRGRID 1\n"
        "sample_rate_hz=8000\n"
        "num_samples=3\n"
        "num_channels=2\n"
        "channel_spacing_m=0.03\n"
        "dtype=f32le\n"
        "layout=channel_major\n"
        "label=desk 100%25 mic%0Aarray\n"
        "END\n"
    )
    return head.encode() + f32le(values)


def adapters():
    # Two layers, rank 2: enc0.conv1 (out 3, in 2, k 1) and head (out 1, in 3, k 1).
    a0 = [0.1 * (i + 1) for i in range(2 * 2 * 1)]
    b0 = [-0.0, 1.0, 2.0, -1.5, 0.25, 3.0]
    a1 = [1.0, -1.0, 0.5, -0.5, 0.125, 8.0]
    b1 = [0.75, -0.25]
    payload = f32le(a0) + f32le(b0) + f32le(a1) + f32le(b1)
    off = [0, 16, 40, 64]
    head = (
        "SFRADAPT 1\n"
        "rank=2\n"
        "base_model_fingerprint=golden-fp-0001\n"
        "seed=42\n"
        "layers=2\n"
        f"layer=enc0.conv1 3 2 1 4 {off[0]} 16 {off[1]} 24\n"
        f"layer=head 1 3 1 0.5 {off[2]} 24 {off[3]} 8\n"
        "END\n"
    )
    return head.encode() + payload


F64_VALUES = [0.1, -2.5, 1e-40, 1e30, 1.0 / 3.0, -0.0]


def external_f64_time_major():
    # N=3, M=2 stored as (n0m0, n0m1, n1m0, n1m1, n2m0, n2m1), little-endian f64.
    return b"".join(struct.pack("<d", v) for v in F64_VALUES)


def external_f32_big():
    return b"".join(struct.pack(">f", v) for v in [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])


def main():
    os.makedirs(OUT, exist_ok=True)
    files = {
        "grid_v1.sfrgrid": grid(),
        "adapters_v1.sfradapt": adapters(),
        "external_f64_time_major.bin": external_f64_time_major(),
        "external_f32_be.bin": external_f32_big(),
    }
    for name, data in files.items():
        with open(os.path.join(OUT, name), "wb") as f:
            f.write(data)
    print("f64 -> f32 bits (time-major order):")
    for v in F64_VALUES:
        (bits,) = struct.unpack("<I", struct.pack("<f", v))
        print("  %r -> 0x%08X" % (v, bits))


if __name__ == "__main__":
    main()
