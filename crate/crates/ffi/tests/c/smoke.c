#include <stdio.h>
#include <string.h>

#include "aes_ffi.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke CHECKPOINT\n");
        return 64;
    }
    AesModel *model = NULL;
    AesStatus st = aes_model_load(argv[1], NULL, &model);
    if (st != AES_STATUS_OK) {
        fprintf(stderr, "load: %d %s\n", st, aes_last_error_message());
        return 1;
    }
    char *json = NULL;
    st = aes_model_score_json(model, 8, "A short story. It ends well.", &json);
    if (st != AES_STATUS_OK) {
        fprintf(stderr, "score: %d %s\n", st, aes_last_error_message());
        return 1;
    }
    printf("%s\n", json);
    aes_string_free(json);

    st = aes_model_score_json(model, 99, "text", &json);
    if (st != AES_STATUS_UNKNOWN_PROMPT || strlen(aes_last_error_message()) == 0) {
        return 2;
    }

    int32_t h[4] = {0, 1, 2, 2};
    int32_t m[4] = {0, 2, 2, 2};
    double k = 0.0;
    if (aes_qwk(h, m, 4, 0, 2, &k) != AES_STATUS_OK) {
        return 3;
    }
    printf("qwk %.12f\n", k);
    aes_model_free(model);
    return 0;
}
