"""Parameter and adapter counts of the default autoencoder, tallied by hand
from the block description (no shared code with the library)."""


def conv(cin, cout, k):
    return cout * cin * k * k + cout, (cin, cout, k)


def multires(cin, F, k):
    f1 = max(1, round(F / 6))
    f2 = max(1, round(F / 3))
    f3 = max(1, F - f1 - f2)
    return [conv(cin, f1, k), conv(f1, f2, k), conv(f2, f3, k), conv(cin, f1 + f2 + f3, 1)]


def layers(depth=3, F=128, k=3, cin=128, cout=1):
    out = []
    c = cin
    for level in range(depth):
        out += multires(c, F, k)
        c = F
        out += [x for _ in range(depth - level) for x in (conv(F, F, k), conv(F, F, 1))]
        out.append(conv(F, F, k))  # stride-2 downsampling conv
    out += multires(F, F, k)
    for level in reversed(range(depth)):
        out.append(conv(F, F, k))  # conv after upsampling
        out += multires(2 * F, F, k)
    out.append(conv(F, cout, 1))
    return out


def adapter(shapes, r):
    return sum(r * cin * k + cout * k * r for cin, cout, k in shapes)


if __name__ == "__main__":
    ls = layers()
    base = sum(p for p, _ in ls)
    shapes = [s for _, s in ls]
    print("layers", len(ls), "base", base)
    for r in (1, 2, 4, 8, 16, 32, 64):
        n = adapter(shapes, r)
        print("r", r, "adapter", n, "fraction %.17g" % (n / base))
    tiny = layers(depth=1, F=4, k=3, cin=2, cout=1)
    print("tiny depth1 F4 cin2", sum(p for p, _ in tiny), len(tiny))
    print("single 128x128 k3 r16", adapter([(128, 128, 3)], 16))
