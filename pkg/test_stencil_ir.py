import unittest

from stencil_ir import (
    CATALOG_ORDER,
    Node,
    Ref,
    StencilInvariantError,
    StencilSyntaxError,
    TileShape,
    apply_association,
    catalog,
    flop_count,
    kernel_by_name,
    lower,
    parse_spec,
    reassociate,
    serialize_spec,
)

# name: (dims, radius, loads, coeffs, flops)
CATALOG_COUNTS = {
    "jacobi_2d": (2, 1, 5, 1, 5),
    "j2d5pt": (2, 1, 5, 6, 10),
    "box2d1r": (2, 1, 9, 9, 17),
    "j2d9pt": (2, 2, 9, 10, 18),
    "j2d9pt_gol": (2, 1, 9, 10, 18),
    "star2d3r": (2, 3, 13, 13, 25),
    "star3d2r": (3, 2, 13, 13, 25),
    "ac_iso_cd": (3, 4, 26, 13, 38),
    "box3d1r": (3, 1, 27, 27, 53),
    "j3d27pt": (3, 1, 27, 28, 54),
}

SMALL = """
grid
  name small
  dims 2
  radius 1
  arrays inp:input out:output
taps
  c inp 0 0
  e inp 0 1
coeffs
  k 0.5
expr
  out = fma(k, e, c)
"""


class TestCatalog(unittest.TestCase):
    def test_catalog_matches_operation_counts(self):
        specs = catalog()
        self.assertEqual([s.name for s in specs], list(CATALOG_ORDER))
        for spec in specs:
            dims, radius, loads, coeffs, flops = CATALOG_COUNTS[spec.name]
            with self.subTest(kernel=spec.name):
                self.assertEqual(spec.dims, dims)
                self.assertEqual(spec.radius, radius)
                self.assertEqual(len(spec.taps), loads)
                self.assertEqual(len(spec.coeffs), coeffs)
                self.assertEqual(flop_count(spec), flops)

    def test_catalog_sorted_by_flops(self):
        flops = [flop_count(s) for s in catalog()]
        self.assertEqual(flops, sorted(flops))

    def test_extra_kernels_resolve(self):
        self.assertEqual(kernel_by_name("sym7pt").dims, 3)
        self.assertEqual(flop_count(kernel_by_name("identity")), 0)
        with self.assertRaises(KeyError):
            kernel_by_name("nope")

    def test_dynamic_coefficient(self):
        spec = kernel_by_name("ac_iso_cd")
        self.assertTrue(spec.coeff_map["imp"].dynamic)
        self.assertIn("prev", spec.input_arrays)


class TestParser(unittest.TestCase):
    def test_parse_small(self):
        spec = parse_spec(SMALL)
        self.assertEqual(spec.expr, Node("fma", (Ref("k"), Ref("e"), Ref("c"))))
        self.assertEqual(flop_count(spec), 2)

    def test_serialized_form_parses_back(self):
        for spec in catalog() + (kernel_by_name("sym7pt"), kernel_by_name("identity")):
            with self.subTest(kernel=spec.name):
                self.assertEqual(parse_spec(serialize_spec(spec)), spec)

    def test_syntax_error_has_position(self):
        text = SMALL.replace("out = fma(k, e, c)", "out = fma(k, e c)")
        with self.assertRaises(StencilSyntaxError) as ctx:
            parse_spec(text)
        self.assertEqual(ctx.exception.line, 13)
        self.assertGreater(ctx.exception.column, 1)

    def test_wrong_arity(self):
        with self.assertRaises(StencilSyntaxError):
            parse_spec(SMALL.replace("fma(k, e, c)", "add(k, e, c)"))

    def test_offset_beyond_radius(self):
        with self.assertRaises(StencilInvariantError) as ctx:
            parse_spec(SMALL.replace("e inp 0 1", "e inp 0 2"))
        self.assertIn("(0, 2)", str(ctx.exception))

    def test_unused_coefficient(self):
        with self.assertRaises(StencilInvariantError):
            parse_spec(SMALL.replace("  k 0.5", "  k 0.5\n  unused 1.0"))

    def test_no_taps(self):
        text = SMALL.replace("  c inp 0 0\n  e inp 0 1\n", "")
        with self.assertRaises(StencilInvariantError):
            parse_spec(text)

    def test_last_statement_must_write_output(self):
        with self.assertRaises(StencilSyntaxError):
            parse_spec(SMALL.replace("out = fma", "tmp = fma"))


class TestTransforms(unittest.TestCase):
    def test_reassociation_keeps_flops(self):
        for spec in catalog():
            with self.subTest(kernel=spec.name):
                self.assertEqual(flop_count(reassociate(spec.expr, 4)), flop_count(spec))
                self.assertEqual(flop_count(apply_association(spec.expr, "balanced4")), flop_count(spec))

    def test_source_association_is_identity(self):
        spec = kernel_by_name("star3d2r")
        self.assertEqual(apply_association(spec.expr, "source"), spec.expr)

    def test_lower_evaluates_addend_first(self):
        ops = lower(parse_spec(SMALL))
        self.assertEqual(len(ops), 1)
        self.assertEqual(ops[0].srcs, (("coeff", "k"), ("tap", "e"), ("tap", "c")))

    def test_identity_lowers_to_move(self):
        ops = lower(kernel_by_name("identity"))
        self.assertEqual([op.op for op in ops], ["mov"])

    def test_tile_shape(self):
        tile = TileShape.for_spec(kernel_by_name("star3d2r"))
        self.assertEqual(tile.extents, (16, 16, 16))
        self.assertEqual(tile.interior, (12, 12, 12))
        self.assertEqual(tile.strides, (256, 16, 1))
        self.assertEqual(tile.lin((1, 2, 3)), 256 + 32 + 3)
        with self.assertRaises(StencilInvariantError):
            TileShape((4, 4), halo=2)


if __name__ == "__main__":
    unittest.main()
