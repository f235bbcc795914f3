"""Walk through one blind aggregation round, stage by stage.

Four senders encrypt real matrices under the receiver's public key, the
aggregator combines ciphertexts without being able to read them, and
only the receiver decrypts the sum.  Prints what each party can see.
"""

import numpy as np

from ppsgcn import crypto


def main():
    kp = crypto.keygen(modulus_bits=512, seed=11)
    codec = crypto.FixedPointCodec(frac_bits=40, max_terms=4)
    print(f"keypair: {kp.public.modulus_bits}-bit modulus, "
          f"fixed point with {codec.frac_bits} fractional bits")
    print(f"overflow guard per entry: |x| < {codec.guard(kp.public):.3e}\n")

    rng = np.random.default_rng(0)
    mats = [rng.normal(size=(3, 3)) for _ in range(4)]

    # sender side
    cts = [crypto.encrypt_matrix(m, kp.public, codec, key_id=0) for m in mats]
    print(f"sender 0 plaintext[0,0] = {mats[0][0, 0]:+.6f}")
    print(f"ciphertext[0] as the aggregator sees it: "
          f"{str(cts[0].data[0])[:48]}... ({cts[0].pk.modulus_bits * 2} bits)")

    # aggregator side: ciphertext arithmetic only, no key material
    total_ct = crypto.aggregate_ciphertexts(cts)
    has_secret = hasattr(total_ct.pk, "decrypt")
    print(f"aggregator holds decrypt capability: {has_secret}")

    # receiver side
    total = crypto.decrypt_matrix(total_ct, kp, codec)
    true = sum(mats)
    err = np.abs(total - true).max()
    print(f"\ndecrypted sum[0,0] = {total[0, 0]:+.12f}")
    print(f"plaintext sum[0,0] = {true[0, 0]:+.12f}")
    print(f"max error {err:.3e} vs codec bound {4 * 2.0 ** -codec.frac_bits:.3e}")
    assert err <= 4 * 2.0 ** -codec.frac_bits


if __name__ == "__main__":
    main()
