/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const compacter_heatmap: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const lr_schedule: (a: number, b: number, c: number) => [number, number, number, number];
export const sampled_vs_ported: (a: number, b: bigint, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
