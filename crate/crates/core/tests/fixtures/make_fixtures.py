"""Writes the IDX and CSV fixtures used by the data tests."""
import struct

pixels = [
    [[0, 255, 128], [1, 2, 3]],
    [[255, 254, 0], [64, 32, 16]],
]
with open("two-images-idx3-ubyte", "wb") as f:
    f.write(struct.pack(">IIII", 0x00000803, 2, 2, 3))
    for img in pixels:
        for row in img:
            f.write(bytes(row))
with open("two-labels-idx1-ubyte", "wb") as f:
    f.write(struct.pack(">II", 0x00000801, 2))
    f.write(bytes([7, 3]))
with open("three-labels-idx1-ubyte", "wb") as f:
    f.write(struct.pack(">II", 0x00000801, 3))
    f.write(bytes([7, 3, 1]))
with open("three-rows.csv", "w") as f:
    f.write("a,label,b\n0.5,1,-2.25\n1e-3,0,4\n-7,2,0.125\n")
