/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_clusters_free: (a: number, b: number) => void;
export const clusterClicks: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const clusters_dense: (a: number) => number;
export const clusters_effectiveSupport: (a: number) => number;
export const clusters_entropy: (a: number) => number;
export const clusters_labels: (a: number) => [number, number];
export const clusters_noise: (a: number) => [number, number];
export const rewardField: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const scheduleCurve: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
