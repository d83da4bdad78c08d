use dualtrain::analysis::{memory_estimate, memory_table, Architecture, MemoryModel};
use proptest::prelude::*;

fn total(mm: &MemoryModel, method: &str) -> u64 {
    memory_estimate(mm, method).unwrap().total_bytes
}

/// Parameter counts written out by hand for the 200M preset.
#[test]
fn gaussian_200m_items_match_hand_count() {
    let mm = MemoryModel::for_architecture(&Architecture::llama_200m(), 256);
    let (e, i, l, v) = (1024u64, 2816u64, 12u64, 32000u64);
    let adapted = l * (4 * e * e + 3 * i * e);
    let direct = 2 * v * e + (2 * l + 1) * e;
    assert_eq!(mm.num_params(), adapted + direct);
    let trainable = l * (4 * 256 * e + 3 * 256 * i);
    let b = memory_estimate(&mm, "gaussian").unwrap();
    assert_eq!(b.item("base_weights"), 2 * adapted);
    assert_eq!(b.item("direct_weights"), 2 * direct);
    assert_eq!(b.item("trainable"), 2 * trainable);
    assert_eq!(b.item("gradients"), 2 * (trainable + direct));
    assert_eq!(b.item("optimizer_states"), 4 * (trainable + direct));
    assert_eq!(b.item("projectors"), 0);
    assert_eq!(b.total_bytes, b.items.iter().map(|x| x.bytes).sum::<u64>());

    let so = memory_estimate(&mm, "semi_orthogonal").unwrap();
    assert_eq!(so.item("projectors"), 2 * l * (4 * 256 * e + 3 * 256 * e));

    let q8 = memory_estimate(&mm, "gaussian+int8").unwrap();
    assert_eq!(q8.item("base_weights"), adapted);
    let groups = l * (4 * (e * e).div_ceil(256) + 3 * (i * e).div_ceil(256));
    assert_eq!(q8.item("quant_scales"), 4 * groups);
    let q4 = memory_estimate(&mm, "gaussian+nf4").unwrap();
    assert_eq!(q4.item("base_weights"), adapted / 2);
}

#[test]
fn full_training_costs_eight_bytes_per_parameter() {
    for arch in [Architecture::llama_200m(), Architecture::llama_1b3()] {
        let mm = MemoryModel::for_architecture(&arch, 256);
        assert_eq!(total(&mm, "full"), 8 * mm.num_params());
    }
}

#[test]
fn method_ordering_holds_at_both_scales() {
    for (arch, rank) in [(Architecture::llama_200m(), 256), (Architecture::llama_1b3(), 512)] {
        let mm = MemoryModel::for_architecture(&arch, rank);
        let t = |m: &str| total(&mm, m);
        assert!(t("full") > t("relora"));
        assert!(t("relora") > t("svd"));
        assert!(t("svd") > t("semi_orthogonal"));
        assert!(t("semi_orthogonal") >= t("gaussian"));
        assert_eq!(t("gaussian"), t("rademacher"));
        for fam in ["svd", "gaussian", "rademacher", "semi_orthogonal", "two_sided_gaussian", "two_sided_svd"] {
            assert!(t(&format!("{fam}+nf4")) < t(&format!("{fam}+int8")), "{fam}");
            assert!(t(&format!("{fam}+int8")) < t(fam), "{fam}");
        }
    }
}

#[test]
fn table_has_every_row_once() {
    let mm = MemoryModel::for_architecture(&Architecture::llama_200m(), 256);
    let rows = memory_table(&mm).unwrap();
    assert_eq!(rows.len(), 2 + 6 * 3);
    let mut names: Vec<_> = rows.iter().map(|r| r.method.clone()).collect();
    names.dedup();
    assert_eq!(names.len(), rows.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimates_grow_with_rank_and_shrink_with_quantization(
        layers in 1usize..6,
        e in 16usize..256,
        i in 16usize..512,
        rank in 1usize..16,
        method in proptest::sample::select(vec!["relora", "svd", "gaussian", "semi_orthogonal", "two_sided_gaussian", "two_sided_svd", "kronecker"]),
    ) {
        let arch = Architecture { layers, embed_dim: e, intermediate_dim: i, heads: 4, vocab: 1000 };
        let lo = MemoryModel::for_architecture(&arch, rank);
        let hi = MemoryModel::for_architecture(&arch, rank + 1);
        prop_assert!(total(&lo, method) <= total(&hi, method));
        if method != "relora" {
            let q8 = format!("{method}+int8");
            let q4 = format!("{method}+nf4");
            prop_assert!(total(&lo, &q4) < total(&lo, &q8));
            prop_assert!(total(&lo, &q8) < total(&lo, method));
        }
        prop_assert!(total(&lo, method) < total(&lo, "full"));
    }
}
