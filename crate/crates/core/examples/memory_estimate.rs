//! Itemized training-memory estimates for the 200M and 1.3B presets.

use dualtrain::analysis::{memory_table, Architecture, MemoryModel};

fn main() -> dualtrain::Result<()> {
    for (name, arch, rank) in [("200m", Architecture::llama_200m(), 256), ("1.3b", Architecture::llama_1b3(), 512)] {
        let mm = MemoryModel::for_architecture(&arch, rank);
        println!("{name}: {} parameters, rank {rank}", mm.num_params());
        for row in memory_table(&mm)? {
            println!("  {:<26} {:>7.3} GiB", row.method, row.gib());
        }
    }
    Ok(())
}
