fn main() {
    // GEMM kernels are provided by the system OpenBLAS.
    println!("cargo:rustc-link-lib=dylib=openblas");
}
